//! Anchor selection from the class-token attention map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Anchor, AttentionMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub count: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { count: 8 }
    }
}

/// The `count` highest-attention cells, by descending score.
///
/// Equal scores are ordered by ascending row-major index, so the result does
/// not depend on iteration order.
pub fn select_anchors(attn: &AttentionMap, config: AnchorConfig) -> Result<Vec<Anchor>> {
    let cells = attn.height() * attn.width();
    if config.count == 0 {
        return Err(Error::InvalidInput("at least one anchor is required".into()));
    }
    if config.count > cells {
        return Err(Error::TooManyAnchors {
            requested: config.count,
            available: cells,
        });
    }
    let data = attn.data();
    let mut order: Vec<usize> = (0..cells).collect();
    let by_rank = |a: &usize, b: &usize| data[*b].total_cmp(&data[*a]).then(a.cmp(b));
    if config.count < cells {
        order.select_nth_unstable_by(config.count - 1, by_rank);
        order.truncate(config.count);
    }
    order.sort_unstable_by(by_rank);
    Ok(order
        .into_iter()
        .map(|i| Anchor::new(i / attn.width(), i % attn.width(), data[i]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn oracle(attn: &AttentionMap, k: usize) -> Vec<(usize, usize)> {
        let mut all: Vec<(f32, usize)> = attn.data().iter().copied().zip(0..).collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.iter()
            .take(k)
            .map(|&(_, i)| (i / attn.width(), i % attn.width()))
            .collect()
    }

    #[test]
    fn unique_argmax() {
        let mut data = vec![0.1; 5 * 6];
        data[2 * 6 + 3] = 0.9;
        let attn = AttentionMap::new(5, 6, data).unwrap();
        let a = select_anchors(&attn, AnchorConfig { count: 1 }).unwrap();
        assert_eq!((a[0].row, a[0].col), (2, 3));
    }

    #[test]
    fn default_count_is_eight() {
        assert_eq!(AnchorConfig::default().count, 8);
    }

    #[test]
    fn ties_by_row_major_index() {
        let attn = AttentionMap::new(2, 2, vec![0.5; 4]).unwrap();
        let a = select_anchors(&attn, AnchorConfig { count: 3 }).unwrap();
        let cells: Vec<_> = a.iter().map(|a| (a.row, a.col)).collect();
        assert_eq!(cells, vec![(0, 0), (0, 1), (1, 0)]);
    }

    #[test]
    fn too_many_rejected() {
        let attn = AttentionMap::new(2, 2, vec![0.5; 4]).unwrap();
        assert!(matches!(
            select_anchors(&attn, AnchorConfig { count: 5 }),
            Err(Error::TooManyAnchors { .. })
        ));
        assert!(select_anchors(&attn, AnchorConfig { count: 4 }).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn matches_full_sort(
            h in 1usize..8, w in 1usize..8, k in 1usize..64,
            values in prop::collection::vec(0u8..6, 64),
        ) {
            let data: Vec<f32> = values[..h * w].iter().map(|&v| f32::from(v) / 5.0).collect();
            let attn = AttentionMap::new(h, w, data).unwrap();
            let k = k.min(h * w);
            let got = select_anchors(&attn, AnchorConfig { count: k }).unwrap();
            let cells: Vec<_> = got.iter().map(|a| (a.row, a.col)).collect();
            prop_assert_eq!(&cells, &oracle(&attn, k));
            let min_sel = got.iter().map(|a| a.score).fold(f32::INFINITY, f32::min);
            let max_unsel = (0..h * w)
                .filter(|i| !cells.contains(&(i / w, i % w)))
                .map(|i| attn.data()[i])
                .fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(min_sel >= max_unsel);
        }
    }
}
