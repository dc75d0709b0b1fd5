//! Patch-grid types: backbone features, attention, anchors and boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-major `d x h x w` feature tensor from the self-supervised backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "feature map dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values", channels * height * width),
                actual: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature map has non-finite values".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The `h x w` plane of one channel.
    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }
}

/// Non-negative `h x w` attention of the class-token query over patches.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl AttentionMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("attention map must be non-empty".into()));
        }
        if data.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values", height * width),
                actual: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "attention values must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }
}

/// A grid cell chosen as the centre of a proposal set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub row: usize,
    pub col: usize,
    pub score: f32,
}

impl Anchor {
    pub fn new(row: usize, col: usize, score: f32) -> Self {
        Self { row, col, score }
    }
}

/// Inclusive grid rectangle `(r0, c0) ..= (r1, c1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridRect {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl GridRect {
    pub fn new(r0: usize, c0: usize, r1: usize, c1: usize) -> Self {
        debug_assert!(r0 <= r1 && c0 <= c1);
        Self { r0, c0, r1, c1 }
    }

    pub fn rows(&self) -> usize {
        self.r1 - self.r0 + 1
    }

    pub fn cols(&self) -> usize {
        self.c1 - self.c0 + 1
    }

    pub fn area(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.r0..=self.r1).contains(&row) && (self.c0..=self.c1).contains(&col)
    }
}

/// A candidate edit region on the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxProposal {
    pub anchor: Anchor,
    /// 1-based size index `j` within the anchor's proposal set.
    pub size_index: usize,
    /// Rectangle after clamping to the grid.
    pub rect: GridRect,
    /// `(h, w)` of the grid the rectangle lives on.
    pub grid: (usize, usize),
}

impl BoxProposal {
    /// Square box of `side` patches centred on `anchor`, clamped to the grid.
    ///
    /// Even sides extend one patch further up/left than down/right.
    pub fn centered(
        anchor: Anchor,
        size_index: usize,
        side: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        let (h, w) = grid;
        if anchor.row >= h || anchor.col >= w {
            return Err(Error::InvalidInput(format!(
                "anchor ({}, {}) outside {h}x{w} grid",
                anchor.row, anchor.col
            )));
        }
        if side == 0 {
            return Err(Error::InvalidInput("box side must be at least 1".into()));
        }
        let half = side as isize / 2;
        let clamp_span = |center: usize, limit: usize| {
            let lo = center as isize - half;
            let hi = lo + side as isize - 1;
            (lo.max(0) as usize, (hi.min(limit as isize - 1)) as usize)
        };
        let (r0, r1) = clamp_span(anchor.row, h);
        let (c0, c1) = clamp_span(anchor.col, w);
        Ok(Self {
            anchor,
            size_index,
            rect: GridRect::new(r0, c0, r1, c1),
            grid,
        })
    }

    /// Box with an explicit rectangle; used by baselines that are not square.
    pub fn with_rect(
        anchor: Anchor,
        size_index: usize,
        rect: GridRect,
        grid: (usize, usize),
    ) -> Result<Self> {
        if rect.r0 > rect.r1 || rect.c0 > rect.c1 || rect.r1 >= grid.0 || rect.c1 >= grid.1 {
            return Err(Error::InvalidInput(format!(
                "rect {rect:?} does not fit the {}x{} grid",
                grid.0, grid.1
            )));
        }
        Ok(Self {
            anchor,
            size_index,
            rect,
            grid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unclamped_odd_box() {
        let b = BoxProposal::centered(Anchor::new(7, 7, 1.0), 7, 7, (14, 14)).unwrap();
        assert_eq!(b.rect, GridRect::new(4, 4, 10, 10));
    }

    #[test]
    fn even_box_biases_up_left() {
        let b = BoxProposal::centered(Anchor::new(7, 7, 1.0), 2, 2, (14, 14)).unwrap();
        assert_eq!(b.rect, GridRect::new(6, 6, 7, 7));
    }

    #[test]
    fn corner_anchor_clamps() {
        let b = BoxProposal::centered(Anchor::new(0, 0, 1.0), 3, 3, (14, 14)).unwrap();
        assert_eq!(b.rect, GridRect::new(0, 0, 1, 1));
        let b = BoxProposal::centered(Anchor::new(13, 13, 1.0), 3, 3, (14, 14)).unwrap();
        assert_eq!(b.rect, GridRect::new(12, 12, 13, 13));
    }

    #[test]
    fn anchor_outside_grid_rejected() {
        assert!(BoxProposal::centered(Anchor::new(14, 0, 1.0), 1, 1, (14, 14)).is_err());
    }

    #[test]
    fn feature_map_indexing() {
        let f = FeatureMap::new(2, 2, 3, (0..12).map(|v| v as f32).collect()).unwrap();
        assert_eq!(f.get(1, 1, 2), 11.0);
        assert_eq!(f.plane(1), &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
        assert!(FeatureMap::new(1, 1, 1, vec![f32::INFINITY]).is_err());
        assert!(AttentionMap::new(1, 2, vec![0.0, -1.0]).is_err());
    }

    proptest! {
        #[test]
        fn centered_boxes_stay_on_grid(
            h in 1usize..20, w in 1usize..20, r in 0usize..20, c in 0usize..20, side in 1usize..30
        ) {
            let anchor = Anchor::new(r % h, c % w, 0.0);
            let b = BoxProposal::centered(anchor, 1, side, (h, w)).unwrap();
            prop_assert!(b.rect.r0 <= b.rect.r1 && b.rect.c0 <= b.rect.c1);
            prop_assert!(b.rect.r1 < h && b.rect.c1 < w);
            prop_assert!(b.rect.contains(anchor.row, anchor.col));
            prop_assert!(b.rect.rows() <= side && b.rect.cols() <= side);
            // Unclamped extent is exactly `side`.
            let lo = anchor.row as isize - (side / 2) as isize;
            let hi = lo + side as isize - 1;
            prop_assert_eq!(b.rect.r0 as isize, lo.max(0));
            prop_assert_eq!(b.rect.r1 as isize, hi.min(h as isize - 1));
        }
    }
}
