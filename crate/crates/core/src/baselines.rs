//! Random edit-region baselines for ablations.
//!
//! Both draw box sizes uniformly over the image extent, measured in patches,
//! and clamp to the grid. Unlike the learned proposals these boxes need not
//! be square.

use rand::Rng;

use crate::anchors::{select_anchors, AnchorConfig};
use crate::error::Result;
use crate::grid::{Anchor, AttentionMap, BoxProposal, GridRect};

/// Size index recorded on baseline boxes, which are not part of a proposal set.
pub const BASELINE_SIZE_INDEX: usize = 0;

/// Side lengths drawn from `U[0, h] x U[0, w]` and rounded, redrawn while
/// either side rounds to zero.
fn random_extent(rng: &mut impl Rng, grid: (usize, usize)) -> (usize, usize) {
    loop {
        let rows = rng.gen_range(0.0..=grid.0 as f64).round() as usize;
        let cols = rng.gen_range(0.0..=grid.1 as f64).round() as usize;
        if rows > 0 && cols > 0 {
            return (rows, cols);
        }
    }
}

/// Box of `rows x cols` patches centred on `anchor` and clamped to the grid.
pub fn clamped_box(anchor: Anchor, rows: usize, cols: usize, grid: (usize, usize)) -> Result<BoxProposal> {
    let span = |center: usize, side: usize, limit: usize| {
        let lo = center as isize - side as isize / 2;
        let hi = lo + side as isize - 1;
        (lo.max(0) as usize, hi.min(limit as isize - 1) as usize)
    };
    let (r0, r1) = span(anchor.row, rows, grid.0);
    let (c0, c1) = span(anchor.col, cols, grid.1);
    BoxProposal::with_rect(anchor, BASELINE_SIZE_INDEX, GridRect::new(r0, c0, r1, c1), grid)
}

/// Uniformly random centre cell and random size.
pub fn baseline_random_random(attn: &AttentionMap, rng: &mut impl Rng) -> Result<BoxProposal> {
    let grid = attn.grid();
    let row = rng.gen_range(0..grid.0);
    let col = rng.gen_range(0..grid.1);
    let (rows, cols) = random_extent(rng, grid);
    clamped_box(Anchor::new(row, col, attn.get(row, col)), rows, cols, grid)
}

/// One random-size box per attention anchor.
pub fn baseline_dino_random(
    attn: &AttentionMap,
    anchors: AnchorConfig,
    rng: &mut impl Rng,
) -> Result<Vec<BoxProposal>> {
    select_anchors(attn, anchors)?
        .into_iter()
        .map(|a| {
            let (rows, cols) = random_extent(rng, attn.grid());
            clamped_box(a, rows, cols, attn.grid())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn map(h: usize, w: usize, seed: u64) -> AttentionMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttentionMap::new(h, w, (0..h * w).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn seeded_boxes_repeat() {
        let attn = map(14, 14, 3);
        let a = baseline_random_random(&attn, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = baseline_random_random(&attn, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let cfg = AnchorConfig::default();
        let a = baseline_dino_random(&attn, cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = baseline_dino_random(&attn, cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn centres_uniform_chi_square() {
        let attn = map(14, 14, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let mut rows = [0usize; 14];
        let mut cols = [0usize; 14];
        for _ in 0..n {
            let b = baseline_random_random(&attn, &mut rng).unwrap();
            rows[b.anchor.row] += 1;
            cols[b.anchor.col] += 1;
        }
        let dist = ChiSquared::new(13.0).unwrap();
        for counts in [rows, cols] {
            let expected = n as f64 / 14.0;
            let stat: f64 = counts
                .iter()
                .map(|&c| (c as f64 - expected).powi(2) / expected)
                .sum();
            let p = 1.0 - dist.cdf(stat);
            assert!(p > 0.01, "chi-square p = {p}");
        }
    }

    #[test]
    fn dino_anchor_is_top_cell() {
        let attn = map(8, 8, 4);
        let top = select_anchors(&attn, AnchorConfig { count: 1 }).unwrap()[0];
        let boxes =
            baseline_dino_random(&attn, AnchorConfig { count: 1 }, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        assert_eq!(boxes[0].anchor, top);
        let all = select_anchors(&attn, AnchorConfig::default()).unwrap();
        let boxes =
            baseline_dino_random(&attn, AnchorConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        assert_eq!(boxes.iter().map(|b| b.anchor).collect::<Vec<_>>(), all);
    }

    #[test]
    fn boxes_stay_in_bounds_fuzz() {
        let attn = map(9, 13, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10_000 {
            let b = baseline_random_random(&attn, &mut rng).unwrap();
            assert!(b.rect.r1 < 9 && b.rect.c1 < 13 && b.rect.area() > 0);
            assert!(b.rect.contains(b.anchor.row, b.anchor.col));
        }
    }

    proptest! {
        #[test]
        fn clamped_box_within_grid(h in 1usize..20, w in 1usize..20, r in 0usize..20, c in 0usize..20,
                                   rows in 1usize..25, cols in 1usize..25) {
            let (r, c) = (r % h, c % w);
            let b = clamped_box(Anchor::new(r, c, 0.0), rows, cols, (h, w)).unwrap();
            prop_assert!(b.rect.r1 < h && b.rect.c1 < w);
            prop_assert!(b.rect.rows() <= rows && b.rect.cols() <= cols);
        }
    }
}
