//! RGB float images and binary region masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BoxProposal;

/// An `H x W x 3` image, row-major and channel-interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values", height * width * Self::CHANNELS),
                actual: format!("{} values", data.len()),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidInput(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from a per-pixel function. Values are clamped to `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                data.extend(px.iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Mean colour over the whole image.
    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += f64::from(px[c]);
            }
        }
        let n = (self.height * self.width) as f64;
        acc.map(|v| v / n)
    }

    /// Returns a copy where pixels with `mask == 1` are replaced by `f(y, x)`.
    pub fn with_masked(
        &self,
        mask: &RegionMask,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        if mask.height() != self.height || mask.width() != self.width {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{} mask", self.height, self.width),
                actual: format!("{}x{} mask", mask.height(), mask.width()),
            });
        }
        let mut data = self.data.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                if mask.get(y, x) {
                    let i = (y * self.width + x) * 3;
                    let px = f(y, x);
                    for c in 0..3 {
                        data[i + c] = px[c].clamp(0.0, 1.0);
                    }
                }
            }
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Converts from interleaved 8-bit RGB.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
    }

    /// Converts to interleaved 8-bit RGB, rounding half up.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    /// Raw little-endian bytes of the float buffer, for hashing and caching.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(&(self.height as u64).to_le_bytes());
        out.extend_from_slice(&(self.width as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("image blob too short".into()));
        }
        let height = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let width = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != height.saturating_mul(width).saturating_mul(12) {
            return Err(Error::Format("image blob length does not match header".into()));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(height, width, data)
    }
}

/// `[0, 1]` float to byte, round half up.
pub fn quantize(v: f32) -> u8 {
    (f64::from(v.clamp(0.0, 1.0)) * 255.0 + 0.5).floor().min(255.0) as u8
}

/// Binary `H x W` mask handed to the editor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMask {
    height: usize,
    width: usize,
    #[serde(skip)]
    data: Vec<u8>,
    /// Inclusive pixel bounds `(y0, x0, y1, x1)` of the ones.
    bounds: (usize, usize, usize, usize),
}

impl RegionMask {
    /// Axis-aligned rectangle mask with inclusive pixel bounds.
    pub fn from_pixel_rect(
        height: usize,
        width: usize,
        (y0, x0, y1, x1): (usize, usize, usize, usize),
    ) -> Result<Self> {
        if y0 > y1 || x0 > x1 || y1 >= height || x1 >= width {
            return Err(Error::EmptyMask);
        }
        let mut data = vec![0u8; height * width];
        for y in y0..=y1 {
            data[y * width + x0..=y * width + x1].fill(1);
        }
        Ok(Self {
            height,
            width,
            data,
            bounds: (y0, x0, y1, x1),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn bounds(&self) -> (usize, usize, usize, usize) {
        self.bounds
    }
}

/// Rasterizes a grid box to a pixel mask at the backbone's patch stride.
///
/// Pixel `(y, x)` is set iff `(y / stride, x / stride)` lies in the box. The
/// grid may overhang or undershoot the image by less than one patch.
pub fn rasterize_mask(
    proposal: &BoxProposal,
    patch_stride: usize,
    height: usize,
    width: usize,
) -> Result<RegionMask> {
    if patch_stride == 0 {
        return Err(Error::InvalidInput("patch stride must be at least 1".into()));
    }
    let (grid_h, grid_w) = proposal.grid;
    let fits = |cells: usize, pixels: usize| (cells * patch_stride).abs_diff(pixels) < patch_stride;
    if !fits(grid_h, height) || !fits(grid_w, width) {
        return Err(Error::DimensionMismatch {
            expected: format!(
                "image within one patch of {}x{}",
                grid_h * patch_stride,
                grid_w * patch_stride
            ),
            actual: format!("{height}x{width}"),
        });
    }
    let r = proposal.rect;
    let y0 = r.r0 * patch_stride;
    let x0 = r.c0 * patch_stride;
    let y1 = ((r.r1 + 1) * patch_stride).min(height);
    let x1 = ((r.c1 + 1) * patch_stride).min(width);
    if y0 >= y1 || x0 >= x1 {
        return Err(Error::EmptyMask);
    }
    RegionMask::from_pixel_rect(height, width, (y0, x0, y1 - 1, x1 - 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Anchor, GridRect};
    use proptest::prelude::*;

    fn boxed(rect: GridRect, grid: (usize, usize)) -> BoxProposal {
        BoxProposal {
            anchor: Anchor::new(rect.r0, rect.c0, 0.0),
            size_index: 1,
            rect,
            grid,
        }
    }

    fn brute_count(rect: GridRect, stride: usize, h: usize, w: usize) -> usize {
        let mut n = 0;
        for y in 0..h {
            for x in 0..w {
                let (gy, gx) = (y / stride, x / stride);
                if gy >= rect.r0 && gy <= rect.r1 && gx >= rect.c0 && gx <= rect.c1 {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn full_grid_box_is_all_ones() {
        let m = rasterize_mask(&boxed(GridRect::new(0, 0, 13, 13), (14, 14)), 16, 224, 224)
            .unwrap();
        assert_eq!(m.count(), 224 * 224);
    }

    #[test]
    fn corner_cell_is_one_patch() {
        let m = rasterize_mask(&boxed(GridRect::new(0, 0, 0, 0), (14, 14)), 16, 224, 224)
            .unwrap();
        assert_eq!(m.count(), 256);
        assert_eq!(brute_count(GridRect::new(0, 0, 0, 0), 16, 224, 224), 256);
        assert_eq!(m.bounds(), (0, 0, 15, 15));
    }

    #[test]
    fn center_cell_pixels() {
        let m = rasterize_mask(&boxed(GridRect::new(7, 7, 7, 7), (14, 14)), 16, 224, 224)
            .unwrap();
        for y in 0..224 {
            for x in 0..224 {
                let inside = (112..=127).contains(&y) && (112..=127).contains(&x);
                assert_eq!(m.get(y, x), inside, "pixel {y},{x}");
            }
        }
    }

    #[test]
    fn partial_edge_patch_is_clipped() {
        // 14 cells of 16 px cover 224, image is 220 wide.
        let m = rasterize_mask(&boxed(GridRect::new(13, 13, 13, 13), (14, 14)), 16, 220, 220)
            .unwrap();
        assert_eq!(m.count(), 12 * 12);
    }

    #[test]
    fn grid_image_mismatch_rejected() {
        let err = rasterize_mask(&boxed(GridRect::new(0, 0, 0, 0), (14, 14)), 16, 256, 224);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
        let err = rasterize_mask(&boxed(GridRect::new(0, 0, 0, 0), (14, 14)), 0, 224, 224);
        assert!(err.is_err());
    }

    #[test]
    fn rgb8_round_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        // 0.5 * 255 = 127.5 -> 128
        assert_eq!(quantize(0.5), 128);
        let img = ImageBuffer::from_rgb8(1, 2, &[0, 10, 20, 128, 255, 3]).unwrap();
        assert_eq!(img.to_rgb8(), vec![0, 10, 20, 128, 255, 3]);
    }

    #[test]
    fn invalid_images_rejected() {
        assert!(ImageBuffer::new(0, 1, vec![]).is_err());
        assert!(ImageBuffer::new(1, 1, vec![0.0, 0.0]).is_err());
        assert!(ImageBuffer::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(ImageBuffer::new(1, 1, vec![0.0, f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn float_blob_round_trip() {
        let img = ImageBuffer::from_fn(3, 5, |y, x| [y as f32 / 3.0, x as f32 / 5.0, 0.25]).unwrap();
        assert_eq!(ImageBuffer::from_le_bytes(&img.to_le_bytes()).unwrap(), img);
        assert!(ImageBuffer::from_le_bytes(&img.to_le_bytes()[..20]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn ones_count_matches_brute_force(
            gh in 1usize..6, gw in 1usize..6, stride in 1usize..5,
            a in 0usize..6, b in 0usize..6, c in 0usize..6, d in 0usize..6,
            trim_h in 0usize..4, trim_w in 0usize..4,
        ) {
            let (r0, r1) = ((a % gh).min(b % gh), (a % gh).max(b % gh));
            let (c0, c1) = ((c % gw).min(d % gw), (c % gw).max(d % gw));
            let rect = GridRect::new(r0, c0, r1, c1);
            let h = gh * stride - trim_h.min(stride - 1);
            let w = gw * stride - trim_w.min(stride - 1);
            match rasterize_mask(&boxed(rect, (gh, gw)), stride, h, w) {
                Ok(m) => prop_assert_eq!(m.count(), brute_count(rect, stride, h, w)),
                Err(Error::EmptyMask) => prop_assert_eq!(brute_count(rect, stride, h, w), 0),
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
