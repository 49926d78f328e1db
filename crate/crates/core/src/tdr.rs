//! Text-driven rectification of simulated features.
//!
//! A shared linear map turns a domain text embedding into target statistics
//! `(mu_t, sigma_t)`; the rectified feature is
//! `beta * (sigma_t * (f - mean(f)) / std(f) + mu_t) + f`.
//!
//! Composed after PIN with exact statistics, the result collapses to
//! `z * (beta * sigma_t + sigma) + (beta * mu_t + mu)` where `z` is the
//! standardized source feature, so PIN's `(mu, sigma)` and the rectifier's
//! output are interchangeable. That is why the rectifier only runs while the
//! head is fine-tuned and never while styles are mined.
//! [`rectified_closed_form`] evaluates that collapsed form directly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UldaError};
use crate::simulation::{channel_stats, pin, standardize, standardize_backward, StyleParams};
use crate::tensor::{norm, FeatureMap};

pub const BETA_INIT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectifierParams {
    pub beta: f64,
    pub d: usize,
    /// `2d x d`; rows `0..d` produce `mu_t`, rows `d..2d` produce `sigma_t`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifierGrad {
    pub beta: f64,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl RectifierParams {
    /// Uniform(-1/sqrt(d), 1/sqrt(d)) weights, zero bias, beta = 0.1.
    pub fn new_random<R: Rng>(d: usize, rng: &mut R) -> Self {
        let lim = 1.0 / (d as f64).sqrt();
        RectifierParams {
            beta: BETA_INIT,
            d,
            weight: (0..2 * d * d)
                .map(|_| rng.random_range(-lim..lim))
                .collect(),
            bias: vec![0.0; 2 * d],
        }
    }

    pub fn zeros(d: usize) -> Self {
        RectifierParams {
            beta: BETA_INIT,
            d,
            weight: vec![0.0; 2 * d * d],
            bias: vec![0.0; 2 * d],
        }
    }

    /// Map whose two output blocks both copy the input.
    pub fn identity_blocks(d: usize) -> Self {
        let mut p = RectifierParams::zeros(d);
        for i in 0..d {
            p.weight[i * d + i] = 1.0;
            p.weight[(d + i) * d + i] = 1.0;
        }
        p
    }

    pub fn zero_grad(&self) -> RectifierGrad {
        RectifierGrad {
            beta: 0.0,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = vec![self.beta];
        v.extend_from_slice(&self.weight);
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        self.beta = flat[0];
        let (w, b) = flat[1..].split_at(self.weight.len());
        self.weight.copy_from_slice(w);
        self.bias.copy_from_slice(b);
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }
}

impl RectifierGrad {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = vec![self.beta];
        v.extend_from_slice(&self.weight);
        v.extend_from_slice(&self.bias);
        v
    }
}

pub fn text_to_stats(text_emb: &[f64], params: &RectifierParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = params.d;
    if text_emb.len() != d || params.weight.len() != 2 * d * d || params.bias.len() != 2 * d {
        return Err(UldaError::invalid(format!(
            "rectifier expects {d}-dim text embeddings, got {}",
            text_emb.len()
        )));
    }
    if (norm(text_emb) - 1.0).abs() > 1e-6 {
        return Err(UldaError::invalid("rectifier input must be a unit vector"));
    }
    let out: Vec<f64> = (0..2 * d)
        .map(|r| {
            params.bias[r]
                + params.weight[r * d..(r + 1) * d]
                    .iter()
                    .zip(text_emb)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect();
    let sigma_t = out[d..].to_vec();
    let mut mu_t = out;
    mu_t.truncate(d);
    Ok((mu_t, sigma_t))
}

/// Accumulates parameter gradients of the linear map.
pub fn text_to_stats_backward(
    text_emb: &[f64],
    g_mu: &[f64],
    g_sigma: &[f64],
    grad: &mut RectifierGrad,
) {
    let d = text_emb.len();
    for (r, g) in g_mu.iter().chain(g_sigma).enumerate() {
        grad.bias[r] += g;
        for (w, e) in grad.weight[r * d..(r + 1) * d].iter_mut().zip(text_emb) {
            *w += g * e;
        }
    }
}

fn check_stats(f: &FeatureMap, mu_t: &[f64], sigma_t: &[f64]) -> Result<()> {
    if mu_t.len() != f.dim() || sigma_t.len() != f.dim() {
        return Err(UldaError::invalid(format!(
            "rectifier statistics have {}/{} channels, features {}",
            mu_t.len(),
            sigma_t.len(),
            f.dim()
        )));
    }
    Ok(())
}

pub fn rectify(
    f_st: &FeatureMap,
    mu_t: &[f64],
    sigma_t: &[f64],
    beta: f64,
    eps: f64,
) -> Result<FeatureMap> {
    Ok(rectify_traced(f_st, mu_t, sigma_t, beta, eps)?.0)
}

/// Saved state for [`rectify_backward`].
#[derive(Debug, Clone)]
pub struct RectifyTrace {
    z: FeatureMap,
    std: Vec<f64>,
}

pub fn rectify_traced(
    f_st: &FeatureMap,
    mu_t: &[f64],
    sigma_t: &[f64],
    beta: f64,
    eps: f64,
) -> Result<(FeatureMap, RectifyTrace)> {
    check_stats(f_st, mu_t, sigma_t)?;
    let stats = channel_stats(f_st, eps)?;
    let z = standardize(f_st, &stats)?;
    let mut out = f_st.clone();
    for p in 0..out.pixels() {
        let zp = z.pixel(p);
        for (c, v) in out.pixel_mut(p).iter_mut().enumerate() {
            *v += beta * (sigma_t[c] * zp[c] + mu_t[c]);
        }
    }
    Ok((out, RectifyTrace { z, std: stats.std }))
}

#[derive(Debug, Clone)]
pub struct RectifyGrad {
    pub f_st: FeatureMap,
    pub mu_t: Vec<f64>,
    pub sigma_t: Vec<f64>,
    pub beta: f64,
}

pub fn rectify_backward(
    trace: &RectifyTrace,
    mu_t: &[f64],
    sigma_t: &[f64],
    beta: f64,
    grad_out: &FeatureMap,
) -> RectifyGrad {
    let z = &trace.z;
    let d = z.dim();
    let mut g_mu = vec![0.0; d];
    let mut g_sigma = vec![0.0; d];
    let mut g_beta = 0.0;
    let mut g_z = FeatureMap::zeros(z.height(), z.width(), d);
    for p in 0..z.pixels() {
        let zp = z.pixel(p);
        let gp = grad_out.pixel(p);
        let gzp = g_z.pixel_mut(p);
        for c in 0..d {
            g_beta += gp[c] * (sigma_t[c] * zp[c] + mu_t[c]);
            g_mu[c] += beta * gp[c];
            g_sigma[c] += beta * gp[c] * zp[c];
            gzp[c] = beta * sigma_t[c] * gp[c];
        }
    }
    let mut g_f = standardize_backward(z, &trace.std, &g_z);
    for (a, b) in g_f.as_mut_slice().iter_mut().zip(grad_out.as_slice()) {
        *a += b;
    }
    RectifyGrad {
        f_st: g_f,
        mu_t: g_mu,
        sigma_t: g_sigma,
        beta: g_beta,
    }
}

/// `z * (beta * sigma_t + sigma) + (beta * mu_t + mu)` with `z` the exactly
/// standardized source features (no epsilon).
pub fn rectified_closed_form(
    f_s: &FeatureMap,
    style: &StyleParams,
    mu_t: &[f64],
    sigma_t: &[f64],
    beta: f64,
) -> Result<FeatureMap> {
    check_stats(f_s, mu_t, sigma_t)?;
    check_stats(f_s, &style.mu, &style.sigma)?;
    let stats = channel_stats(f_s, 0.0)?;
    let mut out = standardize(f_s, &stats)?;
    for p in 0..out.pixels() {
        for (c, v) in out.pixel_mut(p).iter_mut().enumerate() {
            *v = *v * (beta * sigma_t[c] + style.sigma[c]) + (beta * mu_t[c] + style.mu[c]);
        }
    }
    Ok(out)
}

/// Losses of rectify∘pin under the two perturbations `sigma += delta` and
/// `sigma_t += delta / beta`. Equal values show the style and rectifier
/// parameters are confounded.
pub fn degeneracy_witness<L>(
    f_s: &FeatureMap,
    style: &StyleParams,
    mu_t: &[f64],
    sigma_t: &[f64],
    beta: f64,
    delta: &[f64],
    loss: L,
) -> Result<(f64, f64)>
where
    L: Fn(&FeatureMap) -> Result<f64>,
{
    if beta == 0.0 {
        return Err(UldaError::invalid("degeneracy witness needs beta != 0"));
    }
    let mut moved_style = style.clone();
    for (s, dl) in moved_style.sigma.iter_mut().zip(delta) {
        *s += dl;
    }
    let a = rectify(&pin(f_s, &moved_style, 0.0)?, mu_t, sigma_t, beta, 0.0)?;

    let moved_sigma_t: Vec<f64> = sigma_t
        .iter()
        .zip(delta)
        .map(|(s, dl)| s + dl / beta)
        .collect();
    let b = rectify(&pin(f_s, style, 0.0)?, mu_t, &moved_sigma_t, beta, 0.0)?;
    Ok((loss(&a)?, loss(&b)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_channel(values: &[f64]) -> FeatureMap {
        FeatureMap::new(1, values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn zero_map_gives_zero_stats() {
        let p = RectifierParams::zeros(2);
        let (m, s) = text_to_stats(&[0.6, 0.8], &p).unwrap();
        assert_eq!(m, vec![0.0, 0.0]);
        assert_eq!(s, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_blocks_copy_the_embedding() {
        let p = RectifierParams::identity_blocks(2);
        let (m, s) = text_to_stats(&[0.6, 0.8], &p).unwrap();
        assert_eq!(m, vec![0.6, 0.8]);
        assert_eq!(s, vec![0.6, 0.8]);
        assert!(text_to_stats(&[1.0, 0.0, 0.0], &p).is_err());
    }

    #[test]
    fn beta_zero_is_exact_identity() {
        let f = one_channel(&[0.3, -2.0, 7.5]);
        let out = rectify(&f, &[4.0], &[-3.0], 0.0, 1e-5).unwrap();
        assert_eq!(out, f);
        assert_eq!(RectifierParams::zeros(1).beta, 0.1);
    }

    #[test]
    fn rectify_hand_instance() {
        let out = rectify(&one_channel(&[0.0, 2.0]), &[4.0], &[2.0], 0.5, 0.0).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 5.0]);
    }

    #[test]
    fn closed_form_reduces_to_pin() {
        let f = FeatureMap::new(2, 2, 2, vec![0.1, 2.0, -0.4, 1.0, 0.9, -3.0, 0.2, 0.5]).unwrap();
        let style = StyleParams {
            mu: vec![1.0, -1.0],
            sigma: vec![0.5, 2.0],
            domain_id: "t".into(),
        };
        let base = pin(&f, &style, 0.0).unwrap();
        let at_zero_beta =
            rectified_closed_form(&f, &style, &[3.0, 3.0], &[1.0, -1.0], 0.0).unwrap();
        let zero_stats = rectified_closed_form(&f, &style, &[0.0; 2], &[0.0; 2], 0.7).unwrap();
        for ((a, b), c) in base
            .as_slice()
            .iter()
            .zip(at_zero_beta.as_slice())
            .zip(zero_stats.as_slice())
        {
            assert!((a - b).abs() < 1e-12);
            assert!((a - c).abs() < 1e-12);
        }
    }
}
