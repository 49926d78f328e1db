//! Cross-domain consistency between the pairwise-similarity structure of
//! stacked class prototypes and that of stacked class-in-domain text
//! embeddings.

use crate::error::{Result, UldaError};
use crate::hca::{Loss, PrototypeSet, TextEmbeddingSet};
use crate::tensor::{cosine, cosine_grad_acc, norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackKind {
    Prototype,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowMeta {
    pub domain_id: String,
    pub class_id: usize,
    pub present: bool,
}

/// `(m*n) x d` rows, domain-major then class.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedEmbeddings {
    pub rows: Vec<f64>,
    pub d: usize,
    pub meta: Vec<RowMeta>,
    pub kind: StackKind,
}

impl StackedEmbeddings {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.rows[i * self.d..(i + 1) * self.d]
    }
}

/// Per-domain `n x d` blocks that can be stacked.
pub trait Stackable {
    const KIND: StackKind;
    fn block(&self) -> (&[f64], usize, &str);
    fn present(&self, k: usize) -> bool;
}

impl Stackable for PrototypeSet {
    const KIND: StackKind = StackKind::Prototype;

    fn block(&self) -> (&[f64], usize, &str) {
        (&self.protos, self.d, &self.domain_id)
    }

    fn present(&self, k: usize) -> bool {
        self.present[k]
    }
}

impl Stackable for TextEmbeddingSet {
    const KIND: StackKind = StackKind::Text;

    fn block(&self) -> (&[f64], usize, &str) {
        (&self.class_embs, self.d, &self.domain_id)
    }

    fn present(&self, _k: usize) -> bool {
        true
    }
}

pub fn stack_domains<T: Stackable>(per_domain: &[T]) -> Result<StackedEmbeddings> {
    let first = per_domain
        .first()
        .ok_or_else(|| UldaError::invalid("nothing to stack"))?;
    let (rows0, d, _) = first.block();
    if d == 0 || rows0.len() % d != 0 {
        return Err(UldaError::invalid("block is not an n x d matrix"));
    }
    let n = rows0.len() / d;
    let mut rows = Vec::with_capacity(per_domain.len() * n * d);
    let mut meta = Vec::with_capacity(per_domain.len() * n);
    for item in per_domain {
        let (block, bd, domain) = item.block();
        if bd != d || block.len() != n * d {
            return Err(UldaError::invalid(format!(
                "domain {domain} block is {}x{bd}, expected {n}x{d}",
                block.len() / bd.max(1)
            )));
        }
        rows.extend_from_slice(block);
        meta.extend((0..n).map(|k| RowMeta {
            domain_id: domain.to_string(),
            class_id: k,
            present: item.present(k),
        }));
    }
    Ok(StackedEmbeddings {
        rows,
        d,
        meta,
        kind: T::KIND,
    })
}

/// Pairwise cosine matrix over the selected rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram {
    pub index: Vec<usize>,
    pub values: Vec<f64>,
}

impl Gram {
    pub fn size(&self) -> usize {
        self.index.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.index.len() + j]
    }
}

fn gram_over(x: &StackedEmbeddings, index: &[usize]) -> Result<Gram> {
    let k = index.len();
    if k < 2 {
        return Err(UldaError::invalid(format!(
            "gram matrix needs at least 2 participating rows, got {k}"
        )));
    }
    if let Some(&bad) = index.iter().find(|&&i| norm(x.row(i)) == 0.0) {
        return Err(UldaError::invalid(format!(
            "participating row {bad} has zero norm"
        )));
    }
    let mut values = vec![0.0; k * k];
    for a in 0..k {
        values[a * k + a] = 1.0;
        for b in a + 1..k {
            let c = cosine(x.row(index[a]), x.row(index[b]));
            values[a * k + b] = c;
            values[b * k + a] = c;
        }
    }
    Ok(Gram {
        index: index.to_vec(),
        values,
    })
}

/// Row-normalized Gram (pairwise cosine) matrix over present rows.
pub fn gram(x: &StackedEmbeddings) -> Result<Gram> {
    let index: Vec<usize> = (0..x.len()).filter(|&i| x.meta[i].present).collect();
    gram_over(x, &index)
}

fn common_rows(c: &StackedEmbeddings, t: &StackedEmbeddings) -> Result<Vec<usize>> {
    if c.d != t.d || c.len() != t.len() {
        return Err(UldaError::invalid(format!(
            "stacks differ in shape: {}x{} vs {}x{}",
            c.len(),
            c.d,
            t.len(),
            t.d
        )));
    }
    for (a, b) in c.meta.iter().zip(&t.meta) {
        if a.domain_id != b.domain_id || a.class_id != b.class_id {
            return Err(UldaError::invalid(format!(
                "row order differs: ({}, {}) vs ({}, {})",
                a.domain_id, a.class_id, b.domain_id, b.class_id
            )));
        }
    }
    Ok((0..c.len())
        .filter(|&i| c.meta[i].present && t.meta[i].present)
        .collect())
}

pub fn dcrl_loss(c: &StackedEmbeddings, t: &StackedEmbeddings) -> Result<Loss> {
    Ok(dcrl_loss_with_grad(c, t)?.0)
}

/// Mean squared difference of the two Grams over rows present in both
/// stacks, and its gradient with respect to the rows of `c`.
pub fn dcrl_loss_with_grad(
    c: &StackedEmbeddings,
    t: &StackedEmbeddings,
) -> Result<(Loss, Vec<f64>)> {
    let index = common_rows(c, t)?;
    let mut grad = vec![0.0; c.rows.len()];
    if index.len() < 2 {
        return Ok((Loss::empty(), grad));
    }
    let gc = gram_over(c, &index)?;
    let gt = gram_over(t, &index)?;
    let k = index.len();
    let scale = 1.0 / (k * k) as f64;
    let mut total = 0.0;
    for (a, b) in gc.values.iter().zip(&gt.values) {
        let diff = a - b;
        total += diff * diff;
    }
    let d = c.d;
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            // G is symmetric: row a enters both (a, b) and (b, a)
            let up = 4.0 * (gc.get(a, b) - gt.get(a, b)) * scale;
            if up == 0.0 {
                continue;
            }
            let (ia, ib) = (index[a], index[b]);
            cosine_grad_acc(c.row(ia), c.row(ib), up, &mut grad[ia * d..(ia + 1) * d]);
        }
    }
    Ok((Loss::ok(total * scale), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(rows: &[&[f64]], kind: StackKind) -> StackedEmbeddings {
        let d = rows[0].len();
        StackedEmbeddings {
            rows: rows.iter().flat_map(|r| r.iter().copied()).collect(),
            d,
            meta: (0..rows.len())
                .map(|k| RowMeta {
                    domain_id: "a".into(),
                    class_id: k,
                    present: true,
                })
                .collect(),
            kind,
        }
    }

    fn protos(domain: &str, n: usize, d: usize, fill: f64) -> PrototypeSet {
        PrototypeSet {
            protos: (0..n * d).map(|i| fill + i as f64).collect(),
            present: vec![true; n],
            d,
            domain_id: domain.into(),
        }
    }

    #[test]
    fn stacking_is_domain_major() {
        let s = stack_domains(&[protos("d1", 3, 2, 0.0), protos("d2", 3, 2, 10.0)]).unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(s.meta[0].domain_id, "d1");
        assert_eq!(s.meta[5].domain_id, "d2");
        assert_eq!(s.meta[5].class_id, 2);
        assert_eq!(s.row(3), &[10.0, 11.0]);
    }

    #[test]
    fn stacking_one_domain_is_identity() {
        let p = protos("d1", 3, 2, 0.5);
        let s = stack_domains(std::slice::from_ref(&p)).unwrap();
        assert_eq!(s.rows, p.protos);
    }

    #[test]
    fn stacking_rejects_mismatched_dims() {
        assert!(stack_domains(&[protos("d1", 3, 2, 0.0), protos("d2", 2, 3, 0.0)]).is_err());
        assert!(stack_domains::<PrototypeSet>(&[]).is_err());
    }

    #[test]
    fn gram_hand_instances() {
        let g = gram(&stack(&[&[1.0, 0.0], &[1.0, 1.0]], StackKind::Text)).unwrap();
        assert!((g.get(0, 1) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(g.get(0, 0), 1.0);
        let o = gram(&stack(&[&[1.0, 0.0], &[0.0, 3.0]], StackKind::Text)).unwrap();
        assert_eq!(o.get(1, 0), 0.0);
        assert!(gram(&stack(&[&[1.0, 0.0], &[0.0, 0.0]], StackKind::Text)).is_err());
    }

    #[test]
    fn dcrl_hand_instance() {
        let c = stack(&[&[1.0, 0.0], &[0.0, 1.0]], StackKind::Prototype);
        let t = stack(&[&[1.0, 0.0], &[1.0, 0.0]], StackKind::Text);
        let l = dcrl_loss(&c, &t).unwrap();
        assert!((l.value - 0.5).abs() < 1e-15);
        assert_eq!(dcrl_loss(&c, &c).unwrap().value, 0.0);
    }

    #[test]
    fn dcrl_with_too_few_rows_is_empty() {
        let mut c = stack(&[&[1.0, 0.0], &[0.0, 1.0]], StackKind::Prototype);
        c.meta[1].present = false;
        let t = stack(&[&[1.0, 0.0], &[1.0, 0.0]], StackKind::Text);
        let l = dcrl_loss(&c, &t).unwrap();
        assert_eq!(l, Loss::empty());
    }
}
