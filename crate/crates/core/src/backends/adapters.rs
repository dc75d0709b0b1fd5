//! Contracts for real pretrained-model adapters.
//!
//! Real adapters are loaded out of tree; this module fixes what they must
//! publish (model identifiers, weight checksums, capability descriptor) and
//! the settings the diffusion inpainter runs with.

use serde::{Deserialize, Serialize};

use super::{BackendId, CapabilityDescriptor, EditorBackend, EditorKind};
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, RegionMask};

/// Native input side of the ViT-B/16 feature and scorer backbones.
pub const NATIVE_RESOLUTION: usize = 224;

/// Published description of one adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterContract {
    pub role: String,
    pub model: String,
    /// Hex SHA-256 of the weight file(s).
    pub weights_sha256: String,
    pub descriptor: CapabilityDescriptor,
    /// Input side the adapter resizes to before inference.
    pub native_resolution: usize,
    /// How edited images are resized or cropped before embedding.
    pub crop_policy: String,
}

impl AdapterContract {
    pub fn validate(&self) -> Result<()> {
        let hex_ok = self.weights_sha256.len() == 64
            && self.weights_sha256.chars().all(|c| c.is_ascii_hexdigit());
        if !hex_ok {
            return Err(Error::InvalidInput(format!(
                "adapter {} has a malformed weight checksum",
                self.model
            )));
        }
        if self.descriptor.patch_stride == 0 || self.native_resolution == 0 {
            return Err(Error::InvalidInput(format!(
                "adapter {} has an empty capability descriptor",
                self.model
            )));
        }
        Ok(())
    }

    pub fn id(&self) -> BackendId {
        BackendId {
            role: self.role.clone(),
            model: self.model.clone(),
            checksum: self.weights_sha256.clone(),
        }
    }
}

/// Settings for mask-constrained diffusion inpainting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InpaintSettings {
    pub guidance_scale: f32,
    pub strength: f32,
}

impl Default for InpaintSettings {
    fn default() -> Self {
        Self {
            guidance_scale: 7.5,
            strength: 0.75,
        }
    }
}

/// Scale that maps an input image onto the backbone's native square input.
///
/// Masks computed on the resized grid are mapped back by dividing pixel
/// coordinates by this factor.
pub fn resize_factor(height: usize, width: usize, native: usize) -> (f64, f64) {
    (native as f64 / height as f64, native as f64 / width as f64)
}

/// Interface-conformance stub for a masked-token (MaskGIT-style) editor.
///
/// Such editors work on a VQ token grid and can only take box masks aligned
/// to that grid. The stub checks the mask and then reports the model as
/// unavailable.
pub struct MaskedTokenEditorStub {
    pub token_stride: usize,
}

impl MaskedTokenEditorStub {
    /// Whether `mask` is a single rectangle aligned to the token grid.
    pub fn accepts(&self, mask: &RegionMask) -> bool {
        let s = self.token_stride;
        let (y0, x0, y1, x1) = mask.bounds();
        let aligned_start = y0 % s == 0 && x0 % s == 0;
        let aligned_end = |end: usize, limit: usize| (end + 1) % s == 0 || end + 1 == limit;
        aligned_start
            && aligned_end(y1, mask.height())
            && aligned_end(x1, mask.width())
            && mask.count() == (y1 - y0 + 1) * (x1 - x0 + 1)
    }
}

impl EditorBackend for MaskedTokenEditorStub {
    fn kind(&self) -> EditorKind {
        EditorKind::MaskedTokens
    }

    fn id(&self) -> BackendId {
        BackendId {
            role: "editor".into(),
            model: "masked-token-stub".into(),
            checksum: "none".into(),
        }
    }

    fn serial_only(&self) -> bool {
        true
    }

    fn edit(&self, _: &ImageBuffer, mask: &RegionMask, _: &str, _: u64) -> Result<ImageBuffer> {
        if !self.accepts(mask) {
            return Err(Error::InvalidInput(format!(
                "masked-token editors need box masks aligned to a {}px token grid",
                self.token_stride
            )));
        }
        Err(Error::backend("masked-token editor is not bundled", false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inpaint_defaults() {
        let s = InpaintSettings::default();
        assert_eq!((s.guidance_scale, s.strength), (7.5, 0.75));
    }

    #[test]
    fn contract_checksum_validation() {
        let mut c = AdapterContract {
            role: "features".into(),
            model: "dino-vitb16".into(),
            weights_sha256: "ab".repeat(32),
            descriptor: CapabilityDescriptor {
                patch_stride: 16,
                feature_dim: 768,
                embed_dim: 0,
                serial_only: true,
            },
            native_resolution: NATIVE_RESOLUTION,
            crop_policy: "resize-shorter-side, center-crop".into(),
        };
        c.validate().unwrap();
        let json = serde_json::to_value(c.descriptor).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"patch_stride": 16, "feature_dim": 768, "embed_dim": 0, "serial_only": true})
        );
        c.weights_sha256 = "xyz".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn token_stub_accepts_only_aligned_boxes() {
        let stub = MaskedTokenEditorStub { token_stride: 16 };
        let aligned = RegionMask::from_pixel_rect(64, 64, (16, 0, 31, 47)).unwrap();
        let ragged = RegionMask::from_pixel_rect(64, 64, (3, 0, 31, 47)).unwrap();
        assert!(stub.accepts(&aligned));
        assert!(!stub.accepts(&ragged));
        let img = ImageBuffer::filled(64, 64, [0.0; 3]).unwrap();
        assert!(stub.edit(&img, &aligned, "dog", 0).unwrap_err().is_backend());
        assert!(!stub.edit(&img, &ragged, "dog", 0).unwrap_err().is_backend());
    }

    #[test]
    fn resize_factor_maps_to_native() {
        assert_eq!(resize_factor(448, 224, 224), (0.5, 1.0));
    }
}
