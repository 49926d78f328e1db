//! Invariant suite behind `ulda selfcheck`: exactness identities, gradient
//! checks against central differences, brute-force oracles, determinism and
//! the no-domain-ID contract. Every check reports its measured error.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::checkpoint::RectifierMode;
use super::config::{RunConfig, Stage1Config};
use super::objective::{stage1_total_loss, Stage1Components};
use super::run::{baseline_checkpoint, evaluate, predict_split, run_stage1, run_stage2, Context};
use crate::dcrl::{dcrl_loss, dcrl_loss_with_grad, RowMeta, StackKind, StackedEmbeddings};
use crate::error::Result;
use crate::gradcheck::{central_diff, relative_error};
use crate::hca::{
    hca_loss, hca_loss_with_grad, label_to_masks, masked_average_pool, pixel_loss,
    pixel_loss_with_grad, regional_loss, regional_loss_with_grad, HcaWeights, LabelMap,
    SimilarityMatrix, TextEmbeddingSet,
};
use crate::seed;
use crate::segmentation::{
    accumulate_confusion, domain_metrics, head_forward, seg_loss, seg_loss_with_grad,
    ConfusionMatrix, SegHead,
};
use crate::simulation::{channel_stats, pin, pin_backward, pin_with_z, StyleParams};
use crate::tdr::{
    degeneracy_witness, rectified_closed_form, rectify, rectify_backward, rectify_traced,
};
use crate::tensor::{normalized, FeatureMap};
use crate::toyworld::{generate_source, make_eval_split, ToySpec};

/// Signature of the PIN implementation under test.
pub type PinFn = fn(&FeatureMap, &StyleParams, f64) -> Result<FeatureMap>;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-8;
const TAU: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} error={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct SelfcheckReport {
    pub checks: Vec<CheckResult>,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&c.to_string());
            out.push('\n');
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        out.push_str(&format!(
            "{} checks, {} failed\n",
            self.checks.len(),
            failed
        ));
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SelfcheckOptions {
    pub seed: u64,
    pub pin: PinFn,
    /// Instance counts; the defaults are the documented release-gate sizes.
    pub pin_instances: usize,
    pub tdr_instances: usize,
    pub grad_instances: usize,
    pub oracle_instances: usize,
    /// Skip the two checks that run the pipeline end to end.
    pub skip_pipeline: bool,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        SelfcheckOptions {
            seed: 7,
            pin,
            pin_instances: 1000,
            tdr_instances: 100,
            grad_instances: 50,
            oracle_instances: 50,
            skip_pipeline: false,
        }
    }
}

fn check(
    name: &'static str,
    measured: f64,
    tolerance: f64,
    detail: impl Into<String>,
) -> CheckResult {
    CheckResult {
        name,
        measured,
        tolerance,
        passed: measured.is_finite() && measured <= tolerance,
        detail: detail.into(),
    }
}

fn failed(name: &'static str, tolerance: f64, err: impl fmt::Display) -> CheckResult {
    CheckResult {
        name,
        measured: f64::INFINITY,
        tolerance,
        passed: false,
        detail: format!("error: {err}"),
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap {
    let offset: Vec<f64> = (0..d).map(|_| 2.0 * normal(rng)).collect();
    let scale: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
    let data = (0..h * w * d)
        .map(|i| offset[i % d] + scale[i % d] * normal(rng))
        .collect();
    FeatureMap::new(h, w, d, data).expect("finite by construction")
}

fn random_shape(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (
        rng.random_range(2..6),
        rng.random_range(2..6),
        rng.random_range(2..7),
    )
}

fn random_style(rng: &mut ChaCha8Rng, d: usize) -> StyleParams {
    StyleParams {
        mu: (0..d).map(|_| 2.0 * normal(rng)).collect(),
        sigma: (0..d).map(|_| rng.random_range(0.3..3.0)).collect(),
        domain_id: "check".into(),
    }
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    normalized(&v).expect("nonzero with probability one")
}

fn random_text(rng: &mut ChaCha8Rng, n: usize, d: usize, domain: &str) -> TextEmbeddingSet {
    TextEmbeddingSet {
        class_embs: (0..n).flat_map(|_| random_unit(rng, d)).collect(),
        domain_emb: random_unit(rng, d),
        d,
        domain_id: domain.into(),
    }
}

/// Labels with every class present at least once when space allows.
fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, n: usize) -> LabelMap {
    let mut labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..n) as u8).collect();
    for k in 0..n.min(h * w) {
        let at = rng.random_range(0..h * w);
        if labels.iter().filter(|&&l| l as usize == k).count() == 0 {
            labels[at] = k as u8;
        }
    }
    LabelMap::new(h, w, n, labels).expect("labels in range")
}

fn pin_stats_lemma(opts: &SelfcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let (mut mean_err, mut std_err) = (0.0f64, 0.0f64);
    for _ in 0..opts.pin_instances {
        let (h, w, d) = random_shape(rng);
        let f = random_map(rng, h, w, d);
        let style = random_style(rng, d);
        let out = (opts.pin)(&f, &style, 0.0)?;
        let s = channel_stats(&out, 0.0)?;
        for c in 0..d {
            mean_err = mean_err.max((s.mean[c] - style.mu[c]).abs() / style.mu[c].abs().max(1.0));
            std_err = std_err.max((s.std[c] - style.sigma[c]).abs());
        }
    }
    // "exact" for the mean is read as exact up to summation roundoff
    let measured = std_err.max(mean_err);
    Ok(check(
        "pin_stats_lemma",
        measured,
        1e-10,
        format!(
            "{} maps, max mean err {mean_err:.2e}, max std err {std_err:.2e}",
            opts.pin_instances
        ),
    ))
}

fn pin_identity(opts: &SelfcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..opts.tdr_instances {
        let (h, w, d) = random_shape(rng);
        let f = random_map(rng, h, w, d);
        let s = channel_stats(&f, eps)?;
        let style = StyleParams::from_stats(&s, "identity");
        let out = (opts.pin)(&f, &style, eps)?;
        for (a, b) in out.as_slice().iter().zip(f.as_slice()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(check(
        "pin_identity",
        worst,
        1e-6,
        format!("{} maps, eps 1e-5", opts.tdr_instances),
    ))
}

fn tdr_closed_form(opts: &SelfcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for _ in 0..opts.tdr_instances {
        let (h, w, d) = random_shape(rng);
        let f = random_map(rng, h, w, d);
        let style = random_style(rng, d);
        let mu_t: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let sigma_t: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let beta = rng.random_range(-1.0..1.0);
        let composed = rectify(&pin(&f, &style, 0.0)?, &mu_t, &sigma_t, beta, 0.0)?;
        let closed = rectified_closed_form(&f, &style, &mu_t, &sigma_t, beta)?;
        for (a, b) in composed.as_slice().iter().zip(closed.as_slice()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(check(
        "tdr_closed_form",
        worst,
        1e-10,
        format!("{} instances", opts.tdr_instances),
    ))
}

fn tdr_degeneracy(opts: &SelfcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for _ in 0..opts.tdr_instances {
        let (h, w, d) = random_shape(rng);
        let n = 3;
        let f = random_map(rng, h, w, d);
        let style = random_style(rng, d);
        let t = random_text(rng, n, d, "check");
        let y = random_labels(rng, h, w, n);
        let mu_t: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let sigma_t: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let beta = rng.random_range(0.05..1.0);
        let delta: Vec<f64> = (0..d).map(|_| 0.1 * normal(rng)).collect();
        let weights = HcaWeights {
            regional: 0.5,
            pixel: 0.5,
        };
        let loss = |x: &FeatureMap| -> Result<f64> {
            let mean = spatial_mean(x);
            Ok(hca_loss(x, &mean, &t, &y, weights, TAU)?.total)
        };
        let (a, b) = degeneracy_witness(&f, &style, &mu_t, &sigma_t, beta, &delta, loss)?;
        worst = worst.max((a - b).abs());
    }
    Ok(check(
        "tdr_degeneracy_witness",
        worst,
        1e-9,
        "sigma+delta vs sigma_t+delta/beta under the alignment loss",
    ))
}

fn spatial_mean(f: &FeatureMap) -> Vec<f64> {
    let mut mean = vec![0.0; f.dim()];
    for row in f.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let inv = 1.0 / f.pixels() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

/// Runs `body` on `count` instances and reports the largest relative error.
fn grad_suite<F>(
    name: &'static str,
    count: usize,
    rng: &mut ChaCha8Rng,
    mut body: F,
) -> Result<CheckResult>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)>,
{
    let mut worst = 0.0f64;
    for _ in 0..count {
        let (analytic, numeric) = body(rng)?;
        worst = worst.max(relative_error(&analytic, &numeric, GRAD_FLOOR));
    }
    Ok(check(
        name,
        worst,
        GRAD_TOL,
        format!("{count} instances, step {GRAD_STEP:.0e}"),
    ))
}

fn grad_scene(opts: &SelfcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    grad_suite("grad_scene_alignment", opts.grad_instances, rng, |rng| {
        let (h, w, d) = random_shape(rng);
        let f = random_map(rng, h, w, d);
        let style = random_style(rng, d);
        let t = random_text(rng, 2, d, "check");
        let y = random_labels(rng, h, w, 2);
        let eps = 1e-5;
        let weights = HcaWeights {
            regional: 0.0,
            pixel: 0.0,
        };
        let (f_st, z) = pin_with_z(&f, &style, eps)?;
        let g = hca_loss_with_grad(&f_st, &t, &y, weights, TAU)?;
        let (gm, gs) = pin_backward(&z, &g.grad_f);
        let analytic: Vec<f64> = gm.into_iter().chain(gs).collect();
        let x0: Vec<f64> = style.mu.iter().chain(&style.sigma).copied().collect();
        let numeric = central_diff(
            |x| {
                let s = StyleParams {
                    mu: x[..d].to_vec(),
                    sigma: x[d..].to_vec(),
                    domain_id: "check".into(),
                };
                let out = pin(&f, &s, eps).expect("valid shapes");
                crate::simulation::scene_alignment_loss(&spatial_mean(&out), &t.domain_emb)
                    .expect("nonzero")
            },
            &x0,
            GRAD_STEP,
        );
        Ok((analytic, numeric))
    })
}

fn random_similarity(rng: &mut ChaCha8Rng, n: usize) -> (SimilarityMatrix, Vec<bool>) {
    let mut present: Vec<bool> = (0..n).map(|_| rng.random_bool(0.75)).collect();
    present[rng.random_range(0..n)] = true;
    let values = (0..n * n)
        .map(|i| {
            if present[i / n] {
                rng.random_range(-1.0..1.0)
            } else {
                0.0
            }
        })
        .collect();
    (
        SimilarityMatrix {
            n,
            values,
            valid_rows: present.clone(),
        },
        present,
    )
}

fn grad_regional(opts: &SelfcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    grad_suite("grad_regional", opts.grad_instances, rng, |rng| {
        let n = rng.random_range(2..6);
        let (s, present) = random_similarity(rng, n);
        let (_, analytic) = regional_loss_with_grad(&s, &present, TAU)?;
        let numeric = central_diff(
            |x| {
                let mut m = s.clone();
                m.values.copy_from_slice(x);
                regional_loss(&m, &present, TAU).expect("valid").value
            },
            &s.values,
            GRAD_STEP,
        );
        Ok((analytic, numeric))
    })
}

fn grad_pixel(opts: &SelfcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    grad_suite("grad_pixel", opts.grad_instances, rng, |rng| {
        let (h, w, _) = random_shape(rng);
        let n = rng.random_range(2..5);
        let y = random_labels(rng, h, w, n);
        let logits: Vec<f64> = (0..h * w * n)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let (_, analytic) = pixel_loss_with_grad(&logits, &y, TAU)?;
        let numeric = central_diff(
            |x| pixel_loss(x, &y, TAU).expect("valid").value,
            &logits,
            GRAD_STEP,
        );
        Ok((analytic, numeric))
    })
}

fn grad_hca(opts: &SelfcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    grad_suite("grad_hca", opts.grad_instances, rng, |rng| {
        let (h, w, d) = random_shape(rng);
        let n = 3;
        let f = random_map(rng, h, w, d);
        let t = random_text(rng, n, d, "check");
        let y = random_labels(rng, h, w, n);
        let weights = HcaWeights {
            regional: rng.random_range(0.1..1.0),
            pixel: rng.random_range(0.1..1.0),
        };
        let analytic = hca_loss_with_grad(&f, &t, &y, weights, TAU)?
            .grad_f
            .into_vec();
        let numeric = central_diff(
            |x| {
                let m = FeatureMap::new(h, w, d, x.to_vec()).expect("finite");
                hca_loss(&m, &spatial_mean(&m), &t, &y, weights, TAU)
                    .expect("valid")
                    .total
            },
            f.as_slice(),
            GRAD_STEP,
        );
        Ok((analytic, numeric))
    })
}

fn random_stack(
    rng: &mut ChaCha8Rng,
    m: usize,
    n: usize,
    d: usize,
    kind: StackKind,
) -> StackedEmbeddings {
    let meta = (0..m * n)
        .map(|i| RowMeta {
            domain_id: format!("d{}", i / n),
            class_id: i % n,
            present: kind == StackKind::Text || rng.random_bool(0.8),
        })
        .collect();
    StackedEmbeddings {
        rows: (0..m * n * d).map(|_| normal(rng)).collect(),
        d,
        meta,
        kind,
    }
}

fn grad_dcrl(opts: &SelfcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    grad_suite("grad_dcrl", opts.grad_instances, rng, |rng| {
        let (m, n, d) = (
            rng.random_range(2..4),
            rng.random_range(2..4),
            rng.random_range(2..6),
        );
        let c = random_stack(rng, m, n, d, StackKind::Prototype);
        let t = random_stack(rng, m, n, d, StackKind::Text);
        let (_, analytic) = dcrl_loss_with_grad(&c, &t)?;
        let numeric = central_diff(
            |x| {
                let mut s = c.clone();
                s.rows.copy_from_slice(x);
                dcrl_loss(&s, &t).expect("valid").value
            },
            &c.rows,
            GRAD_STEP,
        );
        Ok((analytic, numeric))
    })
}

fn grad_seg(opts: &SelfcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    grad_suite("grad_seg", opts.grad_instances, rng, |rng| {
        let (h, w, d) = random_shape(rng);
        let (n, up) = (rng.random_range(2..5), rng.random_range(1..3));
        let f = random_map(rng, h, w, d);
        let head = SegHead::new_random(d, 6, n, up, rng);
        let y = random_labels(rng, h * up, w * up, n);
        let trace = head.forward_traced(&f)?;
        let (_, g_logits) = seg_loss_with_grad(&trace.logits, &y)?;
        let mut g_params = head.zero_grad();
        let g_f = head.backward(&f, &trace, &g_logits, Some(&mut g_params));
        let analytic: Vec<f64> = g_f
            .as_slice()
            .iter()
            .copied()
            .chain(g_params.flat())
            .collect();

        let split = f.as_slice().len();
        let x0: Vec<f64> = f.as_slice().iter().copied().chain(head.flat()).collect();
        let numeric = central_diff(
            |x| {
                let m = FeatureMap::new(h, w, d, x[..split].to_vec()).expect("finite");
                let mut hd = head.clone();
                hd.set_flat(&x[split..]);
                seg_loss(&head_forward(&m, &hd).expect("valid"), &y)
                    .expect("valid")
                    .value
            },
            &x0,
            GRAD_STEP,
        );
        Ok((analytic, numeric))
    })
}

fn grad_rectify(opts: &SelfcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    grad_suite("grad_rectify", opts.grad_instances, rng, |rng| {
        let (h, w, d) = random_shape(rng);
        let f = random_map(rng, h, w, d);
        let mu_t: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let sigma_t: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let beta = rng.random_range(-1.0..1.0);
        let eps = 1e-5;
        let probe: Vec<f64> = (0..h * w * d).map(|_| normal(rng)).collect();
        let probe_map = FeatureMap::new(h, w, d, probe.clone())?;
        let (_, trace) = rectify_traced(&f, &mu_t, &sigma_t, beta, eps)?;
        let g = rectify_backward(&trace, &mu_t, &sigma_t, beta, &probe_map);
        let analytic: Vec<f64> = g
            .f_st
            .as_slice()
            .iter()
            .chain(&g.mu_t)
            .chain(&g.sigma_t)
            .copied()
            .chain([g.beta])
            .collect();

        let n = h * w * d;
        let x0: Vec<f64> = f
            .as_slice()
            .iter()
            .chain(&mu_t)
            .chain(&sigma_t)
            .copied()
            .chain([beta])
            .collect();
        let numeric = central_diff(
            |x| {
                let m = FeatureMap::new(h, w, d, x[..n].to_vec()).expect("finite");
                let out = rectify(&m, &x[n..n + d], &x[n + d..n + 2 * d], x[n + 2 * d], eps)
                    .expect("valid");
                out.as_slice().iter().zip(&probe).map(|(a, b)| a * b).sum()
            },
            &x0,
            GRAD_STEP,
        );
        Ok((analytic, numeric))
    })
}

fn oracle_map(opts: &SelfcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for _ in 0..opts.oracle_instances {
        let (h, w, d) = random_shape(rng);
        let n = rng.random_range(2..6);
        let f = random_map(rng, h, w, d);
        let labels: Vec<u8> = (0..h * w)
            .map(|_| {
                if rng.random_bool(0.1) {
                    crate::hca::IGNORE
                } else {
                    rng.random_range(0..n) as u8
                }
            })
            .collect();
        let y = LabelMap::new(h, w, n, labels.clone())?;
        let protos = masked_average_pool(&f, &label_to_masks(&y, n)?)?;
        for k in 0..n {
            let members: Vec<usize> = (0..h * w).filter(|&p| labels[p] as usize == k).collect();
            if members.is_empty() {
                if protos.present[k] {
                    worst = f64::INFINITY;
                }
                continue;
            }
            for c in 0..d {
                let brute =
                    members.iter().map(|&p| f.pixel(p)[c]).sum::<f64>() / members.len() as f64;
                worst = worst.max((brute - protos.row(k)[c]).abs());
            }
        }
    }
    Ok(check(
        "oracle_masked_average_pool",
        worst,
        1e-12,
        format!("{} instances", opts.oracle_instances),
    ))
}

fn oracle_regional(opts: &SelfcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for _ in 0..opts.oracle_instances {
        let n = rng.random_range(2..7);
        let (s, present) = random_similarity(rng, n);
        let got = regional_loss(&s, &present, TAU)?.value;
        let mut dense = 0.0;
        for i in (0..n).filter(|&i| present[i]) {
            let denom: f64 = (0..n)
                .filter(|&k| present[k])
                .map(|k| (s.get(i, k) / TAU).exp())
                .sum();
            dense -= ((s.get(i, i) / TAU).exp() / denom).ln();
        }
        worst = worst.max((got - dense).abs());
    }
    Ok(check(
        "oracle_regional_ce",
        worst,
        1e-10,
        format!("{} instances", opts.oracle_instances),
    ))
}

fn oracle_metrics(opts: &SelfcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    use std::collections::BTreeSet;
    let mut worst = 0.0f64;
    for _ in 0..opts.oracle_instances {
        let (h, w, _) = random_shape(rng);
        let n = rng.random_range(2..5);
        let truth = random_labels(rng, h, w, n);
        let pred = random_labels(rng, h, w, n);
        let mut cm = ConfusionMatrix::new(n);
        accumulate_confusion(&pred, &truth, &mut cm)?;
        let got = domain_metrics("check", &cm)?;
        let mut ious = Vec::new();
        for k in 0..n {
            let a: BTreeSet<usize> = (0..h * w)
                .filter(|&p| truth.as_slice()[p] as usize == k)
                .collect();
            let b: BTreeSet<usize> = (0..h * w)
                .filter(|&p| pred.as_slice()[p] as usize == k)
                .collect();
            let union = a.union(&b).count();
            if union == 0 {
                continue;
            }
            let iou = a.intersection(&b).count() as f64 / union as f64;
            worst = worst.max((got.per_class_iou[k].unwrap_or(f64::NAN) - iou).abs());
            ious.push(iou);
        }
        let miou = 100.0 * ious.iter().sum::<f64>() / ious.len() as f64;
        worst = worst.max((got.miou - miou).abs());
    }
    Ok(check(
        "oracle_metrics_iou",
        worst,
        1e-9,
        format!("{} instances", opts.oracle_instances),
    ))
}

fn oracle_stage1_total(opts: &SelfcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for _ in 0..opts.oracle_instances {
        let cfg = Stage1Config {
            lambda_hc: rng.random_range(0.0..2.0),
            lambda_dc: rng.random_range(0.0..2.0),
            lambda_seg: rng.random_range(0.0..2.0),
            ..Stage1Config::default()
        };
        let c = Stage1Components {
            hc: rng.random_range(0.0..5.0),
            dc: rng.random_range(0.0..5.0),
            seg: rng.random_range(0.0..5.0),
        };
        let oracle = cfg.lambda_hc * c.hc + cfg.lambda_dc * c.dc + cfg.lambda_seg * c.seg;
        worst = worst.max((stage1_total_loss(c, &cfg)? - oracle).abs());
    }
    Ok(check(
        "oracle_stage1_total",
        worst,
        1e-12,
        format!("{} instances", opts.oracle_instances),
    ))
}

/// A scaled-down config for the pipeline checks.
pub fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.toy = ToySpec {
        n_train: 3,
        n_eval_per_domain: 2,
        n_calibration: 6,
        ..ToySpec::default()
    };
    cfg.head.pretrain_iterations = 20;
    cfg.stage1.steps = 3;
    cfg.stage2.iterations = 10;
    cfg
}

fn determinism(opts: &SelfcheckOptions, _: &mut ChaCha8Rng) -> Result<CheckResult> {
    let run = || -> Result<(Vec<u8>, Vec<u8>, String)> {
        let ctx = Context::new(small_config(opts.seed))?;
        let source = generate_source(&ctx.cfg.toy)?;
        let split = make_eval_split(&ctx.cfg.toy)?;
        let s1 = run_stage1(&ctx, &source)?;
        let s2 = run_stage2(&ctx, &source, &s1.bank, RectifierMode::Learned)?;
        let report = evaluate(&ctx, &s2.checkpoint, &split)?;
        Ok((
            s1.bank.to_bytes()?,
            s2.checkpoint.to_bytes(),
            report.to_json()?,
        ))
    };
    let a = run()?;
    let b = run()?;
    let differing = [a.0 != b.0, a.1 != b.1, a.2 != b.2]
        .iter()
        .filter(|&&x| x)
        .count();
    Ok(check(
        "determinism",
        differing as f64,
        0.0,
        "bank, checkpoint and report bytes across two runs",
    ))
}

fn no_domain_id(opts: &SelfcheckOptions, _: &mut ChaCha8Rng) -> Result<CheckResult> {
    let ctx = Context::new(small_config(opts.seed))?;
    let source = generate_source(&ctx.cfg.toy)?;
    let ckpt = baseline_checkpoint(&ctx, &source)?;
    let split = make_eval_split(&ctx.cfg.toy)?;
    let before = predict_split(&ctx, &ckpt, &split)?;
    let mut shuffled = split.clone();
    shuffled.domains.reverse();
    let tags: Vec<String> = shuffled
        .samples
        .iter()
        .rev()
        .map(|s| s.domain.clone())
        .collect();
    for (s, tag) in shuffled.samples.iter_mut().zip(tags) {
        s.domain = tag;
    }
    let after = predict_split(&ctx, &ckpt, &shuffled)?;
    let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
    Ok(check(
        "no_domain_id_shuffle",
        changed as f64,
        0.0,
        format!("{} eval images, domain tags permuted", before.len()),
    ))
}

type CheckFn = fn(&SelfcheckOptions, &mut ChaCha8Rng) -> Result<CheckResult>;

/// Name, tolerance, body. The last two run the pipeline.
const CHECKS: [(&str, f64, CheckFn); 17] = [
    ("pin_stats_lemma", 1e-10, pin_stats_lemma),
    ("pin_identity", 1e-6, pin_identity),
    ("tdr_closed_form", 1e-10, tdr_closed_form),
    ("tdr_degeneracy_witness", 1e-9, tdr_degeneracy),
    ("grad_scene_alignment", GRAD_TOL, grad_scene),
    ("grad_regional", GRAD_TOL, grad_regional),
    ("grad_pixel", GRAD_TOL, grad_pixel),
    ("grad_hca", GRAD_TOL, grad_hca),
    ("grad_dcrl", GRAD_TOL, grad_dcrl),
    ("grad_seg", GRAD_TOL, grad_seg),
    ("grad_rectify", GRAD_TOL, grad_rectify),
    ("oracle_masked_average_pool", 1e-12, oracle_map),
    ("oracle_regional_ce", 1e-10, oracle_regional),
    ("oracle_metrics_iou", 1e-9, oracle_metrics),
    ("oracle_stage1_total", 1e-12, oracle_stage1_total),
    ("determinism", 0.0, determinism),
    ("no_domain_id_shuffle", 0.0, no_domain_id),
];
const PIPELINE_CHECKS: usize = 2;

pub fn check_names() -> impl Iterator<Item = &'static str> {
    CHECKS.iter().map(|c| c.0)
}

/// Runs one named check on its own seed stream, so results do not depend on
/// which other checks ran.
pub fn run_check(opts: &SelfcheckOptions, name: &str) -> Option<CheckResult> {
    let &(name, tol, body) = CHECKS.iter().find(|c| c.0 == name)?;
    let mut rng = seed::rng(opts.seed, &["selfcheck", name]);
    Some(body(opts, &mut rng).unwrap_or_else(|e| failed(name, tol, e)))
}

pub fn run_selfcheck(opts: &SelfcheckOptions) -> SelfcheckReport {
    let take = if opts.skip_pipeline {
        CHECKS.len() - PIPELINE_CHECKS
    } else {
        CHECKS.len()
    };
    SelfcheckReport {
        checks: CHECKS[..take]
            .iter()
            .filter_map(|c| run_check(opts, c.0))
            .collect(),
    }
}

/// PIN with a sign error in the variance (`E[f^2] + E[f]^2`); used to show
/// the statistics check catches a broken implementation.
pub fn pin_with_variance_sign_bug(
    f: &FeatureMap,
    style: &StyleParams,
    eps: f64,
) -> Result<FeatureMap> {
    let n = f.pixels() as f64;
    let d = f.dim();
    let mut out = f.clone();
    for c in 0..d {
        let mean = f.rows().map(|r| r[c]).sum::<f64>() / n;
        let sq = f.rows().map(|r| r[c] * r[c]).sum::<f64>() / n;
        let std = (sq + mean * mean + eps).sqrt();
        for p in 0..f.pixels() {
            let v = &mut out.pixel_mut(p)[c];
            *v = style.sigma[c] * (*v - mean) / std + style.mu[c];
        }
    }
    Ok(out)
}
