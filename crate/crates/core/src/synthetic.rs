//! A constructed scene where the best proposal size can be found by
//! enumeration, used to check that training converges to it.
//!
//! The scene is a dark, nearly uniform image with a faint brightness bump in
//! the middle, so the top attention cells cluster around the centre and none
//! of the proposals touch the border. Under the mock scorer, painting a larger
//! red region lowers the text loss while raising the structural loss, which
//! leaves an interior optimum.

use serde::{Deserialize, Serialize};

use crate::backends::Backends;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::losses::{LossBreakdown, LossContext, PromptSpec};
use crate::regions::argmax;
use crate::seed::{derive_seed, tag};
use crate::trainer::{edit_with_retry, PreparedSample, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScenario {
    pub size: usize,
    pub background: [f32; 3],
    pub bump_amplitude: f32,
    /// Standard deviation of the bump in pixels.
    pub bump_sigma: f32,
    pub prompt: String,
    pub roi_text: String,
}

impl Default for SyntheticScenario {
    fn default() -> Self {
        Self {
            size: 224,
            background: [0.01, 0.05, 0.0],
            bump_amplitude: 0.02,
            bump_sigma: 40.0,
            prompt: "red".into(),
            roi_text: "green".into(),
        }
    }
}

impl SyntheticScenario {
    pub fn image(&self) -> Result<ImageBuffer> {
        let c = self.size as f32 / 2.0;
        let s2 = 2.0 * self.bump_sigma * self.bump_sigma;
        ImageBuffer::from_fn(self.size, self.size, |y, x| {
            let dy = y as f32 + 0.5 - c;
            let dx = x as f32 + 0.5 - c;
            let bump = self.bump_amplitude * (-(dy * dy + dx * dx) / s2).exp();
            self.background.map(|v| v + bump)
        })
    }

    pub fn prompt(&self) -> Result<PromptSpec> {
        PromptSpec::new(self.prompt.as_str())?.with_roi(self.roi_text.as_str())
    }
}

/// Composite losses of every proposal of every anchor, edited with a fixed
/// seed per anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEnumeration {
    /// `losses[i][j]` for anchor `i`, proposal `j + 1`.
    pub losses: Vec<Vec<LossBreakdown>>,
}

impl LossEnumeration {
    pub fn compute(
        image: &ImageBuffer,
        prompt: &PromptSpec,
        backends: &Backends<'_>,
        config: &TrainConfig,
    ) -> Result<Self> {
        let prepared = PreparedSample::new(image, backends, config)?;
        let ctx = LossContext::new(
            backends.scorer,
            image,
            prompt,
            config.loss_weights,
            config.alpha,
            config.beta,
        )?;
        let mut losses = Vec::with_capacity(prepared.anchors.len());
        for (i, masks) in prepared.masks.iter().enumerate() {
            let seed = derive_seed(config.seed, &[tag::SAMPLE, i as u64]);
            let row = masks
                .iter()
                .map(|mask| {
                    let edited = edit_with_retry(
                        backends.editor,
                        image,
                        mask,
                        &prompt.prompt,
                        seed,
                        config.max_retries,
                    )?;
                    ctx.losses(&edited)
                })
                .collect::<Result<Vec<_>>>()?;
            losses.push(row);
        }
        Ok(Self { losses })
    }

    /// 0-based argmin of the total loss for each anchor.
    pub fn per_anchor_best(&self) -> Vec<usize> {
        self.losses
            .iter()
            .map(|row| argmax(&row.iter().map(|l| -l.total).collect::<Vec<_>>()))
            .collect()
    }

    /// The proposal index that minimizes the loss for every anchor, with the
    /// smallest gap to the runner-up over all anchors.
    pub fn unique_best(&self) -> Result<(usize, f64)> {
        let best = self.per_anchor_best();
        let j = *best
            .first()
            .ok_or_else(|| Error::InvalidInput("no anchors enumerated".into()))?;
        if best.iter().any(|&b| b != j) {
            return Err(Error::InvalidInput(format!(
                "anchors disagree on the best proposal: {best:?}"
            )));
        }
        let margin = self
            .losses
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(k, _)| *k != j)
                    .map(|(_, l)| l.total - row[j].total)
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::INFINITY, f64::min);
        if margin <= 0.0 {
            return Err(Error::InvalidInput("best proposal is tied".into()));
        }
        Ok((j, margin))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::MockWorld;
    use std::sync::Arc;

    #[test]
    fn interior_optimum_shared_by_all_anchors() {
        let world = Arc::new(MockWorld::new(0));
        let (f, s, e) = (world.features(), world.scorer(), world.editor());
        let backends = Backends { features: &f, scorer: &s, editor: &e };
        let scenario = SyntheticScenario::default();
        let image = scenario.image().unwrap();
        let config = TrainConfig::default();
        let table = LossEnumeration::compute(&image, &scenario.prompt().unwrap(), &backends, &config)
            .unwrap();
        for row in &table.losses {
            let totals: Vec<String> = row.iter().map(|l| format!("{:.4}", l.total)).collect();
            eprintln!("{}", totals.join(" "));
        }
        let (j, margin) = table.unique_best().unwrap();
        assert!(j > 0 && j < 6, "optimum {j} should be interior");
        assert!(margin > 1e-3);
    }

    #[test]
    fn anchors_avoid_border() {
        let world = Arc::new(MockWorld::new(0));
        let (f, s, e) = (world.features(), world.scorer(), world.editor());
        let backends = Backends { features: &f, scorer: &s, editor: &e };
        let image = SyntheticScenario::default().image().unwrap();
        let prepared = PreparedSample::new(&image, &backends, &TrainConfig::default()).unwrap();
        for boxes in &prepared.proposals {
            for (j, b) in boxes.iter().enumerate() {
                assert_eq!(b.rect.rows(), j + 1);
                assert_eq!(b.rect.cols(), j + 1);
            }
        }
    }
}
