//! Dense row-major feature storage and the handful of vector kernels every
//! loss in the crate is built from.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UldaError};

/// A spatial grid of `d`-dimensional feature vectors.
///
/// Storage is pixel-major: the `d` channels of pixel `p = y * w + x` live at
/// `data[p * d..(p + 1) * d]`. Flattening to an `(h*w) x d` matrix is a view
/// of the same buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return Err(UldaError::invalid(format!(
                "feature map extents must be positive, got {h}x{w}x{d}"
            )));
        }
        if data.len() != h * w * d {
            return Err(UldaError::invalid(format!(
                "feature map {h}x{w}x{d} needs {} values, got {}",
                h * w * d,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(UldaError::invalid(format!(
                "feature map entry {i} is not finite"
            )));
        }
        Ok(FeatureMap { h, w, d, data })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        FeatureMap {
            h,
            w,
            d,
            data: vec![0.0; h * w * d],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.d..(p + 1) * self.d]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.d..(p + 1) * self.d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.d)
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.h == other.h && self.w == other.w && self.d == other.d
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `a / ||a||`, or an error for a zero or non-finite vector.
pub fn normalized(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if !(n.is_finite() && n > 0.0) {
        return Err(UldaError::invalid("cannot normalize a zero-norm vector"));
    }
    Ok(a.iter().map(|v| v / n).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Gradient of `cosine(a, b)` with respect to `a`, accumulated into `out`
/// after scaling by `upstream`.
///
/// `d cos / d a = b / (|a||b|) - cos * a / |a|^2`
pub fn cosine_grad_acc(a: &[f64], b: &[f64], upstream: f64, out: &mut [f64]) {
    let na = norm(a);
    let nb = norm(b);
    let c = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let inv_a2 = 1.0 / (na * na);
    for ((o, &ai), &bi) in out.iter_mut().zip(a).zip(b) {
        *o += upstream * (bi * inv - c * ai * inv_a2);
    }
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log_sum_exp(xs) - xs[target]`, accurate to full relative precision
/// even when the loss is tiny (target logit dominant).
pub fn cross_entropy(xs: &[f64], target: usize) -> f64 {
    let t = xs[target];
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if t >= max {
        let rest: f64 = xs
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != target)
            .map(|(_, &x)| (x - t).exp())
            .sum();
        rest.ln_1p()
    } else {
        log_sum_exp(xs.iter().copied()) - t
    }
}

/// Softmax of `xs` written into `out`.
pub fn softmax_into(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length_and_nonfinite() {
        assert!(FeatureMap::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(FeatureMap::new(1, 2, 1, vec![0.0, f64::NAN]).is_err());
        assert!(FeatureMap::new(0, 2, 1, vec![]).is_err());
    }

    #[test]
    fn log_sum_exp_matches_naive_on_small_inputs() {
        let xs = [0.3, -1.2, 2.5];
        let naive = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(xs.iter().copied()) - naive).abs() < 1e-14);
        // large inputs stay finite
        assert!(log_sum_exp([1000.0, 1000.0].into_iter()).is_finite());
    }

    #[test]
    fn cosine_gradient_is_orthogonal_to_input() {
        let a = [0.3, -0.7, 1.1];
        let b = [1.0, 0.2, -0.4];
        let mut g = [0.0; 3];
        cosine_grad_acc(&a, &b, 1.0, &mut g);
        assert!(dot(&g, &a).abs() < 1e-12);
    }
}
