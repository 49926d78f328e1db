//! Hierarchical context alignment: scene-, region- and pixel-level agreement
//! between simulated features and class-in-domain text embeddings.
//!
//! Every loss comes with a hand-written backward pass. The composite
//! [`hca_loss_with_grad`] chains them back to the simulated feature map.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UldaError};
use crate::simulation::scene_alignment_loss;
use crate::tensor::{cosine, cosine_grad_acc, cross_entropy, norm, softmax_into, FeatureMap};

/// Label value that belongs to no class.
pub const IGNORE: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    h: usize,
    w: usize,
    n_classes: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, n_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(UldaError::invalid(format!(
                "label map {h}x{w} needs {} labels, got {}",
                h * w,
                labels.len()
            )));
        }
        if n_classes == 0 || n_classes > IGNORE as usize {
            return Err(UldaError::invalid(format!(
                "class count must be in 1..={}, got {n_classes}",
                IGNORE
            )));
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != IGNORE && l as usize >= n_classes)
        {
            return Err(UldaError::invalid(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(LabelMap {
            h,
            w,
            n_classes,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Block majority vote down to a `stride`-times coarser grid.
    ///
    /// IGNORE pixels do not vote; a block with no votes is IGNORE. Ties go to
    /// the lowest class id.
    pub fn downsample(&self, stride: usize) -> Result<LabelMap> {
        if stride == 0 || !self.h.is_multiple_of(stride) || !self.w.is_multiple_of(stride) {
            return Err(UldaError::invalid(format!(
                "label map {}x{} not divisible by stride {stride}",
                self.h, self.w
            )));
        }
        let (oh, ow) = (self.h / stride, self.w / stride);
        let mut out = Vec::with_capacity(oh * ow);
        let mut votes = vec![0usize; self.n_classes];
        for by in 0..oh {
            for bx in 0..ow {
                votes.iter_mut().for_each(|v| *v = 0);
                for y in by * stride..(by + 1) * stride {
                    for x in bx * stride..(bx + 1) * stride {
                        let l = self.labels[y * self.w + x];
                        if l != IGNORE {
                            votes[l as usize] += 1;
                        }
                    }
                }
                let mut best = IGNORE;
                let mut best_count = 0;
                for (k, &c) in votes.iter().enumerate() {
                    if c > best_count {
                        best = k as u8;
                        best_count = c;
                    }
                }
                out.push(best);
            }
        }
        LabelMap::new(oh, ow, self.n_classes, out)
    }
}

/// One binary mask per class over the flattened spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    n: usize,
    pixels: usize,
    masks: Vec<bool>,
    counts: Vec<usize>,
    present: Vec<bool>,
}

impl MaskSet {
    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn mask(&self, k: usize) -> &[bool] {
        &self.masks[k * self.pixels..(k + 1) * self.pixels]
    }

    pub fn count(&self, k: usize) -> usize {
        self.counts[k]
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }
}

pub fn label_to_masks(y: &LabelMap, n: usize) -> Result<MaskSet> {
    let pixels = y.len();
    let mut masks = vec![false; n * pixels];
    let mut counts = vec![0usize; n];
    for (p, &l) in y.as_slice().iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        let k = l as usize;
        if k >= n {
            return Err(UldaError::invalid(format!(
                "label {k} at pixel {p} out of range for {n} classes"
            )));
        }
        masks[k * pixels + p] = true;
        counts[k] += 1;
    }
    let present = counts.iter().map(|&c| c > 0).collect();
    Ok(MaskSet {
        n,
        pixels,
        masks,
        counts,
        present,
    })
}

/// Per-class prototypes; absent classes carry a zero row and `present = false`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub protos: Vec<f64>,
    pub present: Vec<bool>,
    pub d: usize,
    pub domain_id: String,
}

impl PrototypeSet {
    pub fn n_classes(&self) -> usize {
        self.present.len()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.protos[k * self.d..(k + 1) * self.d]
    }
}

/// Class-in-domain text embeddings (`n x d`, unit rows) plus the domain-level
/// embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbeddingSet {
    pub class_embs: Vec<f64>,
    pub domain_emb: Vec<f64>,
    pub d: usize,
    pub domain_id: String,
}

impl TextEmbeddingSet {
    pub fn n_classes(&self) -> usize {
        self.class_embs.len() / self.d
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.class_embs[k * self.d..(k + 1) * self.d]
    }
}

pub fn masked_average_pool(f: &FeatureMap, m: &MaskSet) -> Result<PrototypeSet> {
    if f.pixels() != m.pixels {
        return Err(UldaError::invalid(format!(
            "feature map has {} pixels, masks cover {}",
            f.pixels(),
            m.pixels
        )));
    }
    let d = f.dim();
    let mut protos = vec![0.0; m.n * d];
    for k in 0..m.n {
        if !m.present[k] {
            continue;
        }
        let row = &mut protos[k * d..(k + 1) * d];
        for (p, _) in m.mask(k).iter().enumerate().filter(|(_, &on)| on) {
            for (r, v) in row.iter_mut().zip(f.pixel(p)) {
                *r += v;
            }
        }
        let inv = 1.0 / m.counts[k] as f64;
        row.iter_mut().for_each(|r| *r *= inv);
    }
    Ok(PrototypeSet {
        protos,
        present: m.present.clone(),
        d,
        domain_id: String::new(),
    })
}

/// Scatters prototype gradients back onto the feature map gradient.
pub fn masked_average_pool_backward(m: &MaskSet, grad_protos: &[f64], grad_f: &mut FeatureMap) {
    let d = grad_f.dim();
    for k in 0..m.n {
        if !m.present[k] {
            continue;
        }
        let inv = 1.0 / m.counts[k] as f64;
        let g = &grad_protos[k * d..(k + 1) * d];
        for (p, _) in m.mask(k).iter().enumerate().filter(|(_, &on)| on) {
            for (o, gv) in grad_f.pixel_mut(p).iter_mut().zip(g) {
                *o += gv * inv;
            }
        }
    }
}

/// `n x n` prototype-to-text cosine matrix. Rows of absent classes are zero
/// and flagged invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
    pub valid_rows: Vec<bool>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

pub fn similarity_matrix(c: &PrototypeSet, t: &TextEmbeddingSet) -> Result<SimilarityMatrix> {
    let n = c.n_classes();
    if t.n_classes() != n || t.d != c.d {
        return Err(UldaError::invalid(format!(
            "prototypes are {n}x{}, text embeddings {}x{}",
            c.d,
            t.n_classes(),
            t.d
        )));
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        if !c.present[i] {
            continue;
        }
        let ci = c.row(i);
        if norm(ci) == 0.0 {
            return Err(UldaError::invalid(format!(
                "prototype of present class {i} has zero norm"
            )));
        }
        for j in 0..n {
            values[i * n + j] = cosine(ci, t.row(j));
        }
    }
    Ok(SimilarityMatrix {
        n,
        values,
        valid_rows: c.present.clone(),
    })
}

/// Gradient of a loss with respect to the prototypes given its gradient with
/// respect to the similarity matrix.
pub fn similarity_matrix_backward(
    c: &PrototypeSet,
    t: &TextEmbeddingSet,
    grad_s: &[f64],
) -> Vec<f64> {
    let n = c.n_classes();
    let d = c.d;
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        if !c.present[i] {
            continue;
        }
        for j in 0..n {
            let g = grad_s[i * n + j];
            if g != 0.0 {
                cosine_grad_acc(c.row(i), t.row(j), g, &mut out[i * d..(i + 1) * d]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossStatus {
    Ok,
    /// Nothing to average over; the loss contributes zero.
    NoSupport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub status: LossStatus,
}

impl Loss {
    pub fn ok(value: f64) -> Self {
        Loss {
            value,
            status: LossStatus::Ok,
        }
    }

    pub fn empty() -> Self {
        Loss {
            value: 0.0,
            status: LossStatus::NoSupport,
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(UldaError::invalid(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    Ok(())
}

/// Regional prototype-to-text contrastive loss over present classes only.
pub fn regional_loss(s: &SimilarityMatrix, present: &[bool], tau: f64) -> Result<Loss> {
    Ok(regional_loss_with_grad(s, present, tau)?.0)
}

pub fn regional_loss_with_grad(
    s: &SimilarityMatrix,
    present: &[bool],
    tau: f64,
) -> Result<(Loss, Vec<f64>)> {
    check_tau(tau)?;
    let n = s.n;
    if present.len() != n {
        return Err(UldaError::invalid(
            "presence flags do not match matrix size",
        ));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| present[i]).collect();
    let mut grad = vec![0.0; n * n];
    if idx.is_empty() {
        return Ok((Loss::empty(), grad));
    }
    let mut total = 0.0;
    let mut logits = vec![0.0; idx.len()];
    let mut probs = vec![0.0; idx.len()];
    for &i in &idx {
        for (slot, &k) in logits.iter_mut().zip(&idx) {
            *slot = s.get(i, k) / tau;
        }
        let own = idx.iter().position(|&k| k == i).expect("i is present");
        total += cross_entropy(&logits, own);
        softmax_into(&logits, &mut probs);
        for (&pk, &k) in probs.iter().zip(&idx) {
            let target = if k == i { 1.0 } else { 0.0 };
            grad[i * n + k] = (pk - target) / tau;
        }
    }
    Ok((Loss::ok(total), grad))
}

/// `(h*w) x n` pixel-to-class cosine matrix. Zero-norm pixels give zero rows.
pub fn pixel_logits(f: &FeatureMap, t: &TextEmbeddingSet) -> Result<Vec<f64>> {
    if f.dim() != t.d {
        return Err(UldaError::invalid(format!(
            "feature dim {} does not match text dim {}",
            f.dim(),
            t.d
        )));
    }
    let n = t.n_classes();
    let mut out = vec![0.0; f.pixels() * n];
    for (p, fp) in f.rows().enumerate() {
        if norm(fp) == 0.0 {
            continue;
        }
        for i in 0..n {
            out[p * n + i] = cosine(fp, t.row(i));
        }
    }
    Ok(out)
}

pub fn pixel_logits_backward(
    f: &FeatureMap,
    t: &TextEmbeddingSet,
    grad_p: &[f64],
    grad_f: &mut FeatureMap,
) {
    let n = t.n_classes();
    for p in 0..f.pixels() {
        let fp = f.pixel(p);
        if norm(fp) == 0.0 {
            continue;
        }
        for i in 0..n {
            let g = grad_p[p * n + i];
            if g != 0.0 {
                cosine_grad_acc(fp, t.row(i), g, grad_f.pixel_mut(p));
            }
        }
    }
}

/// Softmax cross-entropy of `logits / tau` against labels, averaged over
/// non-IGNORE pixels, with its gradient with respect to `logits`.
pub fn pixel_loss_with_grad(logits: &[f64], y: &LabelMap, tau: f64) -> Result<(Loss, Vec<f64>)> {
    check_tau(tau)?;
    let rows = y.len();
    if rows == 0 || !logits.len().is_multiple_of(rows) {
        return Err(UldaError::invalid(format!(
            "{} logits do not split into {rows} rows",
            logits.len()
        )));
    }
    let n = logits.len() / rows;
    if n != y.n_classes() {
        return Err(UldaError::invalid(format!(
            "logits have {n} classes, labels {}",
            y.n_classes()
        )));
    }
    let mut grad = vec![0.0; logits.len()];
    let counted = y.as_slice().iter().filter(|&&l| l != IGNORE).count();
    if counted == 0 {
        return Ok((Loss::empty(), grad));
    }
    let inv = 1.0 / counted as f64;
    let mut scaled = vec![0.0; n];
    let mut probs = vec![0.0; n];
    let mut total = 0.0;
    for (p, &l) in y.as_slice().iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        let row = &logits[p * n..(p + 1) * n];
        for (s, &v) in scaled.iter_mut().zip(row) {
            *s = v / tau;
        }
        total += cross_entropy(&scaled, l as usize);
        softmax_into(&scaled, &mut probs);
        for (i, &pi) in probs.iter().enumerate() {
            let target = if i == l as usize { 1.0 } else { 0.0 };
            grad[p * n + i] = (pi - target) / tau * inv;
        }
    }
    Ok((Loss::ok(total * inv), grad))
}

pub fn pixel_loss(logits: &[f64], y: &LabelMap, tau: f64) -> Result<Loss> {
    Ok(pixel_loss_with_grad(logits, y, tau)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HcaWeights {
    pub regional: f64,
    pub pixel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HcaBreakdown {
    pub total: f64,
    pub scene: f64,
    pub regional: f64,
    pub pixel: f64,
}

/// Composite alignment objective on an already-pooled scene vector.
pub fn hca_loss(
    f_st: &FeatureMap,
    pooled: &[f64],
    t: &TextEmbeddingSet,
    y: &LabelMap,
    weights: HcaWeights,
    tau: f64,
) -> Result<HcaBreakdown> {
    let masks = label_to_masks(y, t.n_classes())?;
    let protos = masked_average_pool(f_st, &masks)?;
    let s = similarity_matrix(&protos, t)?;
    let regional = regional_loss(&s, &protos.present, tau)?.value;
    let logits = pixel_logits(f_st, t)?;
    let pixel = pixel_loss(&logits, y, tau)?.value;
    let scene = scene_alignment_loss(pooled, &t.domain_emb)?;
    Ok(HcaBreakdown {
        total: weights.regional * regional + weights.pixel * pixel + scene,
        scene,
        regional,
        pixel,
    })
}

/// Output of [`hca_loss_with_grad`].
#[derive(Debug, Clone)]
pub struct HcaGrad {
    pub breakdown: HcaBreakdown,
    pub grad_f: FeatureMap,
    pub prototypes: PrototypeSet,
    pub masks: MaskSet,
}

/// Composite objective with the scene term evaluated on the spatial mean of
/// `f_st`, plus the gradient of the weighted total with respect to `f_st`.
///
/// Cosine is scale invariant, so `1 - cos(mean, e)` equals the loss on the
/// unit-normalized pooled vector.
pub fn hca_loss_with_grad(
    f_st: &FeatureMap,
    t: &TextEmbeddingSet,
    y: &LabelMap,
    weights: HcaWeights,
    tau: f64,
) -> Result<HcaGrad> {
    let n = t.n_classes();
    let d = f_st.dim();
    if y.len() != f_st.pixels() {
        return Err(UldaError::invalid(format!(
            "labels cover {} pixels, features {}",
            y.len(),
            f_st.pixels()
        )));
    }
    let mut grad_f = FeatureMap::zeros(f_st.height(), f_st.width(), d);

    let masks = label_to_masks(y, n)?;
    let mut prototypes = masked_average_pool(f_st, &masks)?;
    prototypes.domain_id = t.domain_id.clone();
    let s = similarity_matrix(&prototypes, t)?;
    let (regional, grad_s) = regional_loss_with_grad(&s, &prototypes.present, tau)?;
    if weights.regional != 0.0 {
        let mut grad_c = similarity_matrix_backward(&prototypes, t, &grad_s);
        grad_c.iter_mut().for_each(|g| *g *= weights.regional);
        masked_average_pool_backward(&masks, &grad_c, &mut grad_f);
    }

    let logits = pixel_logits(f_st, t)?;
    let (pixel, mut grad_logits) = pixel_loss_with_grad(&logits, y, tau)?;
    if weights.pixel != 0.0 {
        grad_logits.iter_mut().for_each(|g| *g *= weights.pixel);
        pixel_logits_backward(f_st, t, &grad_logits, &mut grad_f);
    }

    let mut mean = vec![0.0; d];
    for row in f_st.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let inv = 1.0 / f_st.pixels() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    let scene = scene_alignment_loss(&mean, &t.domain_emb)?;
    let mut grad_mean = vec![0.0; d];
    cosine_grad_acc(&mean, &t.domain_emb, -1.0, &mut grad_mean);
    for p in 0..f_st.pixels() {
        for (o, g) in grad_f.pixel_mut(p).iter_mut().zip(&grad_mean) {
            *o += g * inv;
        }
    }

    let breakdown = HcaBreakdown {
        total: weights.regional * regional.value + weights.pixel * pixel.value + scene,
        scene,
        regional: regional.value,
        pixel: pixel.value,
    };
    Ok(HcaGrad {
        breakdown,
        grad_f,
        prototypes,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(rows: &[[f64; 2]]) -> TextEmbeddingSet {
        TextEmbeddingSet {
            class_embs: rows.iter().flatten().copied().collect(),
            domain_emb: vec![1.0, 0.0],
            d: 2,
            domain_id: "t".into(),
        }
    }

    #[test]
    fn masks_from_small_label_map() {
        let y = LabelMap::new(2, 2, 2, vec![0, 0, 1, IGNORE]).unwrap();
        let m = label_to_masks(&y, 2).unwrap();
        assert_eq!(m.count(0), 2);
        assert_eq!(m.count(1), 1);
        assert_eq!(m.present(), &[true, true]);
        assert_eq!(m.mask(0), &[true, true, false, false]);
        assert_eq!(m.mask(1), &[false, false, true, false]);
    }

    #[test]
    fn all_ignore_has_no_present_class() {
        let y = LabelMap::new(1, 3, 3, vec![IGNORE; 3]).unwrap();
        let m = label_to_masks(&y, 3).unwrap();
        assert!(m.present().iter().all(|&p| !p));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        assert!(LabelMap::new(1, 2, 2, vec![0, 2]).is_err());
        let y = LabelMap::new(1, 2, 3, vec![0, 2]).unwrap();
        assert!(label_to_masks(&y, 2).is_err());
    }

    #[test]
    fn map_of_two_pixels() {
        let f = FeatureMap::new(1, 2, 1, vec![1.0, 3.0]).unwrap();
        let y = LabelMap::new(1, 2, 2, vec![0, 0]).unwrap();
        let m = label_to_masks(&y, 2).unwrap();
        let c = masked_average_pool(&f, &m).unwrap();
        assert_eq!(c.row(0), &[2.0]);
        assert!(!c.present[1]);
        assert_eq!(c.row(1), &[0.0]);
    }

    #[test]
    fn map_of_constant_map_is_the_constant() {
        let v = [0.25, -1.5, 4.0];
        let f = FeatureMap::new(2, 3, 3, v.repeat(6)).unwrap();
        let y = LabelMap::new(2, 3, 1, vec![0; 6]).unwrap();
        let c = masked_average_pool(&f, &label_to_masks(&y, 1).unwrap()).unwrap();
        for (a, b) in c.row(0).iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn similarity_hand_instance() {
        let c = PrototypeSet {
            protos: vec![1.0, 0.0, 0.0, 1.0],
            present: vec![true, true],
            d: 2,
            domain_id: String::new(),
        };
        let s = similarity_matrix(&c, &text(&[[1.0, 0.0], [0.6, 0.8]])).unwrap();
        let want = [1.0, 0.6, 0.0, 0.8];
        for (a, b) in s.values.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_rejects_zero_present_prototype() {
        let c = PrototypeSet {
            protos: vec![0.0, 0.0, 0.0, 1.0],
            present: vec![true, true],
            d: 2,
            domain_id: String::new(),
        };
        assert!(similarity_matrix(&c, &text(&[[1.0, 0.0], [0.0, 1.0]])).is_err());
    }

    #[test]
    fn regional_loss_identity_two_classes() {
        let s = SimilarityMatrix {
            n: 2,
            values: vec![1.0, 0.0, 0.0, 1.0],
            valid_rows: vec![true, true],
        };
        let l = regional_loss(&s, &[true, true], 0.1).unwrap();
        // 2 * log(1 + e^-10)
        let want = 2.0 * (-10.0f64).exp().ln_1p();
        assert!((l.value - want).abs() < 1e-15);
        assert!((l.value - 9.08e-5).abs() < 1e-7);
    }

    #[test]
    fn regional_loss_single_present_class_is_zero() {
        let s = SimilarityMatrix {
            n: 3,
            values: vec![0.2, 0.9, -0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            valid_rows: vec![true, false, false],
        };
        let l = regional_loss(&s, &[true, false, false], 0.1).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.status, LossStatus::Ok);
        let none = regional_loss(&s, &[false, false, false], 0.1).unwrap();
        assert_eq!(none.status, LossStatus::NoSupport);
        assert!(regional_loss(&s, &[true, false, false], 0.0).is_err());
    }

    #[test]
    fn pixel_logits_hand_instance_and_zero_pixel() {
        let f = FeatureMap::new(1, 2, 2, vec![0.6, 0.8, 0.0, 0.0]).unwrap();
        let p = pixel_logits(&f, &text(&[[1.0, 0.0], [0.0, 1.0]])).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-15);
        assert!((p[1] - 0.8).abs() < 1e-15);
        assert_eq!(&p[2..], &[0.0, 0.0]);
    }

    #[test]
    fn pixel_loss_examples() {
        let y = LabelMap::new(1, 1, 2, vec![0]).unwrap();
        let l = pixel_loss(&[1.0, -1.0], &y, 0.1).unwrap().value;
        let want = (-20.0f64).exp().ln_1p();
        assert!((l - want).abs() < 1e-20);
        assert!((l - 2.06e-9).abs() < 1e-11);

        let y1 = LabelMap::new(1, 1, 2, vec![1]).unwrap();
        let u = pixel_loss(&[0.37, 0.37], &y1, 0.1).unwrap().value;
        assert!((u - 2f64.ln()).abs() < 1e-15);

        let yi = LabelMap::new(1, 1, 2, vec![IGNORE]).unwrap();
        let e = pixel_loss(&[0.3, 0.1], &yi, 0.1).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.status, LossStatus::NoSupport);
    }

    #[test]
    fn downsample_majority_and_ignore() {
        let y = LabelMap::new(2, 4, 3, vec![1, 1, IGNORE, IGNORE, 1, 2, IGNORE, IGNORE]).unwrap();
        let ds = y.downsample(2).unwrap();
        assert_eq!(ds.as_slice(), &[1, IGNORE]);
        assert!(y.downsample(3).is_err());
    }
}
