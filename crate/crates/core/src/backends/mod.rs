//! Interfaces for the three frozen pretrained-model roles.
//!
//! * [`FeatureBackend`]: self-supervised ViT features plus class-token attention.
//! * [`ScorerBackend`]: joint image/text embedding model with patch tokens.
//! * [`EditorBackend`]: mask-conditioned text-to-image editor.
//!
//! The free functions in this module wrap the trait calls and enforce the
//! contracts every implementation must satisfy (shape coherence, locality,
//! non-empty inputs), so callers never have to trust an adapter blindly.

pub mod adapters;
pub mod mock;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::grid::{AttentionMap, FeatureMap};
use crate::image::{ImageBuffer, RegionMask};

/// Capability descriptor published by each adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityDescriptor {
    pub patch_stride: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    /// When set, the trainer never issues concurrent calls to this backend.
    pub serial_only: bool,
}

/// Identifies a backend instance in run manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendId {
    pub role: String,
    pub model: String,
    /// SHA-256 of the weights, or a description of the generator for mocks.
    pub checksum: String,
}

pub trait FeatureBackend: Send + Sync {
    fn descriptor(&self) -> CapabilityDescriptor;

    fn id(&self) -> BackendId;

    /// Patch grid for an input size, or [`Error::UnsupportedSize`].
    fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)>;

    fn extract(&self, image: &ImageBuffer) -> Result<(FeatureMap, AttentionMap)>;
}

/// Patch-token features from the scorer's last visual layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub n_tokens: usize,
    pub dim: usize,
    /// Row-major `n_tokens x dim`.
    pub data: Vec<f64>,
}

impl TokenGrid {
    pub fn new(n_tokens: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_tokens * dim {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values", n_tokens * dim),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            n_tokens,
            dim,
            data,
        })
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub trait ScorerBackend: Send + Sync {
    fn descriptor(&self) -> CapabilityDescriptor;

    fn id(&self) -> BackendId;

    fn embed_image(&self, image: &ImageBuffer) -> Result<EmbeddingVector>;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;

    fn patch_tokens(&self, image: &ImageBuffer) -> Result<TokenGrid>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditorKind {
    Mock,
    Diffusion,
    /// Token-grid editor; accepts only patch-aligned box masks.
    MaskedTokens,
}

pub trait EditorBackend: Send + Sync {
    fn kind(&self) -> EditorKind;

    fn id(&self) -> BackendId;

    fn serial_only(&self) -> bool {
        false
    }

    /// Returns an edited copy. Pixels outside the mask must be unchanged.
    fn edit(
        &self,
        image: &ImageBuffer,
        mask: &RegionMask,
        prompt: &str,
        seed: u64,
    ) -> Result<ImageBuffer>;
}

/// The three backends one run uses.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub features: &'a dyn FeatureBackend,
    pub scorer: &'a dyn ScorerBackend,
    pub editor: &'a dyn EditorBackend,
}

impl Backends<'_> {
    pub fn ids(&self) -> Vec<BackendId> {
        vec![self.features.id(), self.scorer.id(), self.editor.id()]
    }
}

/// Runs the feature backend and checks that features and attention share a grid.
pub fn extract_features(
    backend: &dyn FeatureBackend,
    image: &ImageBuffer,
) -> Result<(FeatureMap, AttentionMap)> {
    let grid = backend.grid_for(image.height(), image.width())?;
    let (features, attention) = backend.extract(image)?;
    if features.grid() != grid || attention.grid() != grid {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{} grid", grid.0, grid.1),
            actual: format!(
                "features {:?}, attention {:?}",
                features.grid(),
                attention.grid()
            ),
        });
    }
    if features.channels() != backend.descriptor().feature_dim {
        return Err(Error::DimensionMismatch {
            expected: format!("{} channels", backend.descriptor().feature_dim),
            actual: format!("{} channels", features.channels()),
        });
    }
    Ok((features, attention))
}

pub fn embed_image(backend: &dyn ScorerBackend, image: &ImageBuffer) -> Result<EmbeddingVector> {
    backend.embed_image(image)
}

pub fn embed_text(backend: &dyn ScorerBackend, text: &str) -> Result<EmbeddingVector> {
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    backend.embed_text(text)
}

pub fn patch_tokens(backend: &dyn ScorerBackend, image: &ImageBuffer) -> Result<TokenGrid> {
    let tokens = backend.patch_tokens(image)?;
    if tokens.n_tokens < 2 {
        return Err(Error::InvalidInput(format!(
            "scorer produced {} patch tokens, need at least 2",
            tokens.n_tokens
        )));
    }
    Ok(tokens)
}

/// Calls the editor and verifies the locality contract on the result.
pub fn edit_image(
    backend: &dyn EditorBackend,
    image: &ImageBuffer,
    mask: &RegionMask,
    prompt: &str,
    seed: u64,
) -> Result<ImageBuffer> {
    if mask.height() != image.height() || mask.width() != image.width() {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{} mask", image.height(), image.width()),
            actual: format!("{}x{} mask", mask.height(), mask.width()),
        });
    }
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    if prompt.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let edited = backend.edit(image, mask, prompt, seed)?;
    if edited.height() != image.height() || edited.width() != image.width() {
        return Err(Error::backend("editor changed the image size", false));
    }
    let leaked = image
        .data()
        .chunks_exact(3)
        .zip(edited.data().chunks_exact(3))
        .zip(mask.data())
        .any(|((a, b), &m)| m == 0 && a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()));
    if leaked {
        return Err(Error::backend(
            "editor modified pixels outside the mask",
            false,
        ));
    }
    Ok(edited)
}
