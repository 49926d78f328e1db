//! Frozen vision/text encoder pair and prompt construction.
//!
//! Two implementations ship: [`toy`], a calibrated joint embedding over the
//! synthetic world that needs no weights, and [`external`], which loads an
//! exported first-layer convolution and a table of precomputed text
//! embeddings from `ULDA_ENCODER_DIR`.

pub mod external;
pub mod toy;

use crate::error::{Result, UldaError};
use crate::hca::TextEmbeddingSet;
use crate::tensor::{normalized, FeatureMap};
use crate::toyworld::Image;

/// Maps images to feature grids and pools feature grids to one scene vector.
pub trait VisionEncoder: Send + Sync {
    fn feature_dim(&self) -> usize;
    fn stride(&self) -> usize;
    fn encode_features(&self, image: &Image) -> Result<FeatureMap>;

    /// Unit-norm global embedding. Both shipped encoders mean-pool; the
    /// Stage-1 gradient path assumes it.
    fn pool_scene(&self, features: &FeatureMap) -> Result<Vec<f64>> {
        mean_pool(features)
    }
}

pub trait TextEncoder: Send + Sync {
    fn text_dim(&self) -> usize;

    /// Raw (not necessarily unit) embedding of one fully templated string.
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn mean_pool(features: &FeatureMap) -> Result<Vec<f64>> {
    if features.pixels() == 0 {
        return Err(UldaError::invalid("cannot pool an empty feature map"));
    }
    let mut mean = vec![0.0; features.dim()];
    for row in features.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    normalized(&mean)
}

/// A subset of the CLIP ImageNet prompt templates; `{}` is the prompt slot.
pub const DEFAULT_TEMPLATES: &[&str] = &[
    "a photo of {}.",
    "a bad photo of {}.",
    "a photo of the large {}.",
    "a photo of the small {}.",
    "a bright photo of {}.",
    "a dark photo of {}.",
    "a blurry photo of {}.",
    "a cropped photo of {}.",
    "a low resolution photo of {}.",
    "itap of {}.",
];

pub const DEFAULT_CLASS_PATTERN: &str = "the {class} in {domain}";

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub domain_prompt: String,
    pub class_prompts: Vec<String>,
    pub templates: Vec<String>,
}

/// Last word of a domain description: "driving under rain" -> "rain".
pub fn domain_suffix(description: &str) -> &str {
    description.split_whitespace().last().unwrap_or("")
}

pub fn build_prompt_set(class_names: &[String], domain_description: &str) -> Result<PromptSet> {
    build_prompt_set_with(
        class_names,
        domain_description,
        DEFAULT_CLASS_PATTERN,
        DEFAULT_TEMPLATES,
    )
}

/// `pattern` may use `{class}` and `{domain}` (the description's suffix).
pub fn build_prompt_set_with(
    class_names: &[String],
    domain_description: &str,
    pattern: &str,
    templates: &[&str],
) -> Result<PromptSet> {
    if class_names.is_empty() {
        return Err(UldaError::invalid("prompt set needs at least one class"));
    }
    if domain_description.trim().is_empty() {
        return Err(UldaError::invalid("domain description is empty"));
    }
    if templates.is_empty() || templates.iter().any(|t| !t.contains("{}")) {
        return Err(UldaError::invalid(
            "templates must be non-empty and contain {}",
        ));
    }
    for (i, name) in class_names.iter().enumerate() {
        if name.trim().is_empty() {
            return Err(UldaError::invalid(format!("class {i} has an empty name")));
        }
        if class_names[..i].contains(name) {
            return Err(UldaError::invalid(format!("duplicate class name {name:?}")));
        }
    }
    let suffix = domain_suffix(domain_description);
    Ok(PromptSet {
        domain_prompt: domain_description.to_string(),
        class_prompts: class_names
            .iter()
            .map(|c| pattern.replace("{class}", c).replace("{domain}", suffix))
            .collect(),
        templates: templates.iter().map(|t| t.to_string()).collect(),
    })
}

pub struct EncoderPair {
    pub vision: Box<dyn VisionEncoder>,
    pub text: Box<dyn TextEncoder>,
    /// `feature_dim x text_dim`, applied when the text space is wider.
    pub projection: Option<Vec<f64>>,
    pub descriptor: String,
}

impl std::fmt::Debug for EncoderPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderPair")
            .field("descriptor", &self.descriptor)
            .field("feature_dim", &self.feature_dim())
            .field("text_dim", &self.text_dim())
            .finish()
    }
}

impl EncoderPair {
    pub fn feature_dim(&self) -> usize {
        self.vision.feature_dim()
    }

    pub fn text_dim(&self) -> usize {
        self.text.text_dim()
    }

    fn project(&self, v: Vec<f64>) -> Result<Vec<f64>> {
        let d = self.feature_dim();
        match &self.projection {
            None if v.len() == d => Ok(v),
            None => Err(UldaError::invalid(format!(
                "text dim {} differs from feature dim {d} and no projection is set",
                v.len()
            ))),
            Some(p) => {
                let td = v.len();
                if p.len() != d * td {
                    return Err(UldaError::invalid("projection has the wrong shape"));
                }
                Ok((0..d)
                    .map(|r| {
                        p[r * td..(r + 1) * td]
                            .iter()
                            .zip(&v)
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect())
            }
        }
    }

    /// Embeds every templated form of `prompt`, averages, projects into the
    /// feature space and renormalizes.
    pub fn encode_text<S: AsRef<str>>(&self, prompt: &str, templates: &[S]) -> Result<Vec<f64>> {
        if prompt.trim().is_empty() {
            return Err(UldaError::invalid("prompt is empty"));
        }
        if templates.is_empty() {
            return Err(UldaError::invalid("no prompt templates"));
        }
        let mut acc = vec![0.0; self.text_dim()];
        for t in templates {
            let e = normalized(&self.text.embed(&t.as_ref().replace("{}", prompt))?)?;
            if e.len() != acc.len() {
                return Err(UldaError::invalid(
                    "text encoder returned a wrong-sized vector",
                ));
            }
            for (a, b) in acc.iter_mut().zip(&e) {
                *a += b;
            }
        }
        normalized(&self.project(acc)?)
    }

    pub fn encode_class_text(
        &self,
        prompts: &PromptSet,
        domain_id: &str,
    ) -> Result<TextEmbeddingSet> {
        let mut class_embs = Vec::with_capacity(prompts.class_prompts.len() * self.feature_dim());
        for p in &prompts.class_prompts {
            class_embs.extend(self.encode_text(p, &prompts.templates)?);
        }
        Ok(TextEmbeddingSet {
            class_embs,
            domain_emb: self.encode_text(&prompts.domain_prompt, &prompts.templates)?,
            d: self.feature_dim(),
            domain_id: domain_id.to_string(),
        })
    }

    pub fn encode_image_features(&self, image: &Image) -> Result<FeatureMap> {
        self.vision.encode_features(image)
    }

    pub fn pool_scene(&self, features: &FeatureMap) -> Result<Vec<f64>> {
        self.vision.pool_scene(features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn class_in_domain_prompts() {
        let p = build_prompt_set(&names(&["bus"]), "driving under rain").unwrap();
        assert_eq!(p.class_prompts, vec!["the bus in rain"]);
        assert_eq!(p.domain_prompt, "driving under rain");
        let q = build_prompt_set(&names(&["road", "sky"]), "driving in snow").unwrap();
        assert_eq!(q.class_prompts[0], format!("the {} in {}", "road", "snow"));
    }

    #[test]
    fn prompt_set_preconditions() {
        assert!(build_prompt_set(&[], "driving in snow").is_err());
        assert!(build_prompt_set(&names(&["a", "a"]), "driving in snow").is_err());
        assert!(build_prompt_set(&names(&["a"]), "  ").is_err());
    }

    #[test]
    fn mean_pool_hand_instance() {
        let f = FeatureMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = mean_pool(&f).unwrap();
        assert!((v[0] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((v[1] - 0.5f64.sqrt()).abs() < 1e-15);
        let c = FeatureMap::new(2, 1, 2, vec![3.0, 4.0, 3.0, 4.0]).unwrap();
        assert_eq!(mean_pool(&c).unwrap(), vec![0.6, 0.8]);
    }
}
