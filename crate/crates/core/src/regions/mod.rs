//! Edit-region generation: proposals, ROI pooling, the region generation
//! network and straight-through Gumbel-Softmax selection.

mod gumbel;
mod network;

pub use gumbel::{
    argmax, gumbel_from_uniform, sample_gumbel_selection, softmax, surrogate_gradient,
    surrogate_value, SelectionSample,
};
pub use network::{rgn_forward, ArchitectureDescriptor, ForwardTrace, RegionGeneratorParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Anchor, BoxProposal, FeatureMap};

/// Number and spacing of square proposals per anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalConfig {
    /// Proposals per anchor (`M`).
    pub count: usize,
    /// Grid patches of side added per size index.
    pub scale_step: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            count: 7,
            scale_step: 1,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self, grid: (usize, usize)) -> Result<()> {
        if self.count == 0 || self.scale_step == 0 {
            return Err(Error::InvalidInput(
                "proposal count and scale step must be at least 1".into(),
            ));
        }
        if self.count * self.scale_step > 2 * grid.0.min(grid.1) {
            return Err(Error::InvalidInput(format!(
                "largest proposal side {} exceeds twice the {}x{} grid",
                self.count * self.scale_step,
                grid.0,
                grid.1
            )));
        }
        Ok(())
    }
}

/// The `M` square proposals around `anchor`; proposal `j` has side
/// `j * scale_step` before clamping.
pub fn make_proposals(
    anchor: Anchor,
    config: ProposalConfig,
    grid: (usize, usize),
) -> Result<Vec<BoxProposal>> {
    config.validate(grid)?;
    (1..=config.count)
        .map(|j| BoxProposal::centered(anchor, j, j * config.scale_step, grid))
        .collect()
}

/// A `d x l x l` ROI-pooled feature for one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature {
    pub channels: usize,
    pub size: usize,
    pub size_index: usize,
    pub data: Vec<f32>,
}

/// Bilinear ROI pooling: each of the `l x l` output bins samples the feature
/// map at the bin centre inside the box, per channel.
///
/// Cell `(r, c)` is centred at `(r + 0.5, c + 0.5)` in continuous grid
/// coordinates; samples outside the outermost centres replicate the border.
pub fn roi_pool(features: &FeatureMap, proposal: &BoxProposal, size: usize) -> Result<PooledFeature> {
    if size == 0 {
        return Err(Error::InvalidInput("pool size must be at least 1".into()));
    }
    let (h, w) = features.grid();
    let rect = proposal.rect;
    if proposal.grid != (h, w) || rect.r1 >= h || rect.c1 >= w {
        return Err(Error::DimensionMismatch {
            expected: format!("box on a {h}x{w} grid"),
            actual: format!("{rect:?} on {:?}", proposal.grid),
        });
    }
    let taps = |start: usize, extent: usize, limit: usize| -> Vec<(usize, usize, f64)> {
        (0..size)
            .map(|i| {
                let pos = start as f64 + (i as f64 + 0.5) * extent as f64 / size as f64 - 0.5;
                let pos = pos.clamp(0.0, (limit - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(limit - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = taps(rect.r0, rect.rows(), h);
    let xs = taps(rect.c0, rect.cols(), w);
    let mut data = Vec::with_capacity(features.channels() * size * size);
    for ch in 0..features.channels() {
        let plane = features.plane(ch);
        let at = |r: usize, c: usize| f64::from(plane[r * w + c]);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                data.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Ok(PooledFeature {
        channels: features.channels(),
        size,
        size_index: proposal.size_index,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridRect;
    use proptest::prelude::*;

    #[test]
    fn centre_anchor_proposals() {
        let p = make_proposals(Anchor::new(7, 7, 1.0), ProposalConfig::default(), (14, 14)).unwrap();
        assert_eq!(p.len(), 7);
        for (i, b) in p.iter().enumerate() {
            let side = i + 1;
            assert_eq!(b.size_index, side);
            assert_eq!(b.rect.rows(), side);
            // Geometry oracle: centre minus floor(side / 2).
            assert_eq!(b.rect.r0, 7 - side / 2);
            assert_eq!(b.rect.c0, 7 - side / 2);
        }
        assert_eq!(p[6].rect, GridRect::new(4, 4, 10, 10));
        assert_eq!(ProposalConfig::default().count, 7);
    }

    #[test]
    fn corner_anchor_proposal_clamps() {
        let p = make_proposals(Anchor::new(0, 0, 1.0), ProposalConfig::default(), (14, 14)).unwrap();
        assert_eq!(p[2].rect, GridRect::new(0, 0, 1, 1));
        assert!(p[2].rect.area() <= 9);
        assert_eq!(p.len(), 7);
    }

    #[test]
    fn oversized_config_rejected() {
        let cfg = ProposalConfig {
            count: 9,
            scale_step: 1,
        };
        assert!(make_proposals(Anchor::new(0, 0, 1.0), cfg, (4, 4)).is_err());
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let f = FeatureMap::new(3, 6, 6, vec![0.25; 108]).unwrap();
        let b = BoxProposal::centered(Anchor::new(2, 3, 0.0), 3, 3, (6, 6)).unwrap();
        let p = roi_pool(&f, &b, 7).unwrap();
        assert_eq!(p.data.len(), 3 * 49);
        assert!(p.data.iter().all(|v| (*v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn full_box_identity() {
        let f = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = BoxProposal::with_rect(Anchor::new(0, 0, 0.0), 1, GridRect::new(0, 0, 1, 1), (2, 2))
            .unwrap();
        assert_eq!(roi_pool(&f, &b, 2).unwrap().data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn single_cell_box_replicates() {
        let f = FeatureMap::new(1, 3, 3, (0..9).map(|v| v as f32).collect()).unwrap();
        let b = BoxProposal::centered(Anchor::new(1, 1, 0.0), 1, 1, (3, 3)).unwrap();
        let p = roi_pool(&f, &b, 4).unwrap();
        // Samples straddle the cell centre, so they interpolate toward neighbours
        // symmetrically and average back to the centre value.
        let mean: f32 = p.data.iter().sum::<f32>() / 16.0;
        assert!((mean - 4.0).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn areas_non_decreasing_before_clamping(step in 1usize..3, count in 1usize..8) {
            let cfg = ProposalConfig { count, scale_step: step };
            let p = make_proposals(Anchor::new(20, 20, 0.0), cfg, (64, 64)).unwrap();
            for pair in p.windows(2) {
                prop_assert!(pair[0].rect.area() <= pair[1].rect.area());
            }
        }

        #[test]
        fn translation_consistent(
            seed in prop::collection::vec(-1.0f32..1.0, 36),
            r in 0usize..5, c in 0usize..5, side in 1usize..4, dr in 0usize..5, dc in 0usize..5,
        ) {
            // A 6x6 periodic pattern tiled 3x3; shifting box and map together is a no-op.
            let big = |sr: usize, sc: usize| {
                let data: Vec<f32> = (0..18 * 18)
                    .map(|i| seed[((i / 18 + sr) % 6) * 6 + (i % 18 + sc) % 6])
                    .collect();
                FeatureMap::new(1, 18, 18, data).unwrap()
            };
            let base = BoxProposal::centered(Anchor::new(6 + r, 6 + c, 0.0), 1, side, (18, 18)).unwrap();
            let moved = BoxProposal::centered(Anchor::new(6 + r + dr, 6 + c + dc, 0.0), 1, side, (18, 18)).unwrap();
            let a = roi_pool(&big(0, 0), &base, 5).unwrap();
            let b = roi_pool(&big(6 - dr, 6 - dc), &moved, 5).unwrap();
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
