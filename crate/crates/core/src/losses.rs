//! Composite editing loss and inference quality score.
//!
//! * clip: `D_cos(E_v(edited), E_t(prompt))`
//! * structural: Frobenius distance between patch-token self-similarity
//!   matrices of the edited and source images
//! * directional: `D_cos(E_v(edited) - E_v(source), E_t(prompt) - E_t(roi))`
//!
//! The quality score ranking per-anchor candidates is
//! `alpha * cos(E_t(prompt), E_v(edited)) + beta * cos(E_v(source), E_v(edited))`.

use serde::{Deserialize, Serialize};

use crate::backends::{embed_image, embed_text, patch_tokens, ScorerBackend, TokenGrid};
use crate::embedding::{cosine_distance, cosine_similarity, norm, EmbeddingVector, DEGENERATE_NORM};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Region-of-interest text used when none is supplied.
pub const DEFAULT_ROI_TEXT: &str = "a photo";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub clip: f64,
    pub structural: f64,
    pub directional: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            clip: 1.0,
            structural: 1.0,
            directional: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.clip, self.structural, self.directional];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub clip: f64,
    pub structural: f64,
    pub directional: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub prompt: String,
    pub roi_text: Option<String>,
}

impl PromptSpec {
    pub fn new(prompt: impl Into<String>) -> Result<Self> {
        let prompt = prompt.into();
        if prompt.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(Self {
            prompt,
            roi_text: None,
        })
    }

    pub fn with_roi(mut self, roi: impl Into<String>) -> Result<Self> {
        let roi = roi.into();
        if roi.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        self.roi_text = Some(roi);
        Ok(self)
    }

    /// The region-of-interest text and whether it was defaulted.
    pub fn resolved_roi(&self) -> (&str, bool) {
        match &self.roi_text {
            Some(t) => (t, false),
            None => (DEFAULT_ROI_TEXT, true),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub s_t2i: f64,
    pub s_i2i: f64,
    pub alpha: f64,
    pub beta: f64,
    pub s: f64,
    /// Set when a degenerate embedding forced a similarity to 0.
    pub degenerate: bool,
}

impl QualityScore {
    pub fn from_parts(s_t2i: f64, s_i2i: f64, alpha: f64, beta: f64) -> Self {
        Self {
            s_t2i,
            s_i2i,
            alpha,
            beta,
            s: alpha * s_t2i + beta * s_i2i,
            degenerate: false,
        }
    }
}

pub fn clip_loss(scorer: &dyn ScorerBackend, edited: &ImageBuffer, prompt: &PromptSpec) -> Result<f64> {
    let image = embed_image(scorer, edited)?;
    let text = embed_text(scorer, &prompt.prompt)?;
    cosine_distance(&image, &text)
}

/// Row-major `n x n` matrix of pairwise cosine similarities between tokens.
///
/// Zero-norm tokens get similarity 0 with everything, themselves included.
pub fn self_similarity(tokens: &TokenGrid) -> Vec<f64> {
    let n = tokens.n_tokens;
    let unit: Vec<Option<Vec<f64>>> = (0..n)
        .map(|i| {
            let t = tokens.token(i);
            let len = norm(t);
            (len >= DEGENERATE_NORM).then(|| t.iter().map(|v| v / len).collect())
        })
        .collect();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        let Some(a) = &unit[i] else { continue };
        for k in i..n {
            let Some(b) = &unit[k] else { continue };
            let s = if i == k {
                1.0
            } else {
                a.iter().zip(b).map(|(x, y)| x * y).sum()
            };
            q[i * n + k] = s;
            q[k * n + i] = s;
        }
    }
    q
}

/// Frobenius norm of the difference of two self-similarity matrices.
pub fn similarity_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} similarity entries", a.len()),
            actual: format!("{}", b.len()),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

pub fn structural_loss(
    scorer: &dyn ScorerBackend,
    edited: &ImageBuffer,
    source: &ImageBuffer,
) -> Result<f64> {
    let te = patch_tokens(scorer, edited)?;
    let ts = patch_tokens(scorer, source)?;
    if te.n_tokens != ts.n_tokens {
        return Err(Error::DimensionMismatch {
            expected: format!("{} tokens", ts.n_tokens),
            actual: format!("{} tokens", te.n_tokens),
        });
    }
    similarity_distance(&self_similarity(&te), &self_similarity(&ts))
}

/// Cosine distance between the image-space edit and the text-space edit.
pub fn directional_loss(
    scorer: &dyn ScorerBackend,
    source: &ImageBuffer,
    edited: &ImageBuffer,
    prompt: &PromptSpec,
) -> Result<f64> {
    let image_dir = embed_image(scorer, edited)?.sub(&embed_image(scorer, source)?)?;
    let (roi, _) = prompt.resolved_roi();
    let text_dir = embed_text(scorer, &prompt.prompt)?.sub(&embed_text(scorer, roi)?)?;
    cosine_distance(&image_dir, &text_dir)
}

pub fn composite_loss(weights: LossWeights, clip: f64, structural: f64, directional: f64) -> LossBreakdown {
    LossBreakdown {
        clip,
        structural,
        directional,
        total: weights.clip * clip + weights.structural * structural + weights.directional * directional,
    }
}

pub fn quality_score(
    scorer: &dyn ScorerBackend,
    source: &ImageBuffer,
    edited: &ImageBuffer,
    prompt: &PromptSpec,
    alpha: f64,
    beta: f64,
) -> Result<QualityScore> {
    let text = embed_text(scorer, &prompt.prompt)?;
    score_embeddings(&text, &embed_image(scorer, source)?, &embed_image(scorer, edited)?, alpha, beta)
}

fn score_embeddings(
    text: &EmbeddingVector,
    source: &EmbeddingVector,
    edited: &EmbeddingVector,
    alpha: f64,
    beta: f64,
) -> Result<QualityScore> {
    let t2i = cosine_similarity(text, edited)?;
    let i2i = cosine_similarity(source, edited)?;
    let mut q = QualityScore::from_parts(t2i.unwrap_or(0.0), i2i.unwrap_or(0.0), alpha, beta);
    q.degenerate = t2i.is_none() || i2i.is_none();
    Ok(q)
}

/// Source-side quantities shared by every loss evaluation for one image and
/// prompt, computed once.
pub struct LossContext<'a> {
    scorer: &'a dyn ScorerBackend,
    weights: LossWeights,
    alpha: f64,
    beta: f64,
    source_embedding: EmbeddingVector,
    source_similarity: Vec<f64>,
    source_tokens: usize,
    text: EmbeddingVector,
    text_direction: EmbeddingVector,
}

impl<'a> LossContext<'a> {
    pub fn new(
        scorer: &'a dyn ScorerBackend,
        source: &ImageBuffer,
        prompt: &PromptSpec,
        weights: LossWeights,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        weights.validate()?;
        let tokens = patch_tokens(scorer, source)?;
        let text = embed_text(scorer, &prompt.prompt)?;
        let (roi, _) = prompt.resolved_roi();
        let text_direction = text.sub(&embed_text(scorer, roi)?)?;
        Ok(Self {
            scorer,
            weights,
            alpha,
            beta,
            source_embedding: embed_image(scorer, source)?,
            source_similarity: self_similarity(&tokens),
            source_tokens: tokens.n_tokens,
            text,
            text_direction,
        })
    }

    pub fn losses(&self, edited: &ImageBuffer) -> Result<LossBreakdown> {
        let edited_embedding = embed_image(self.scorer, edited)?;
        let clip = cosine_distance(&edited_embedding, &self.text)?;
        let tokens = patch_tokens(self.scorer, edited)?;
        if tokens.n_tokens != self.source_tokens {
            return Err(Error::DimensionMismatch {
                expected: format!("{} tokens", self.source_tokens),
                actual: format!("{} tokens", tokens.n_tokens),
            });
        }
        let structural = similarity_distance(&self_similarity(&tokens), &self.source_similarity)?;
        let image_dir = edited_embedding.sub(&self.source_embedding)?;
        let directional = cosine_distance(&image_dir, &self.text_direction)?;
        Ok(composite_loss(self.weights, clip, structural, directional))
    }

    pub fn score(&self, edited: &ImageBuffer) -> Result<QualityScore> {
        score_embeddings(
            &self.text,
            &self.source_embedding,
            &embed_image(self.scorer, edited)?,
            self.alpha,
            self.beta,
        )
    }
}
