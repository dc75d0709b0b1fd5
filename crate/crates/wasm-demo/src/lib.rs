//! Browser demo over the mock world: proposal overlays, Gumbel sampling and
//! a short training run on the synthetic scene.
//!
//! Each export has a plain Rust twin so the logic is testable natively;
//! the `JsValue` wrappers themselves only work on wasm32.

use std::sync::Arc;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use regionedit::backends::mock::MockWorld;
use regionedit::regions::{sample_gumbel_selection, softmax};
use regionedit::synthetic::{LossEnumeration, SyntheticScenario};
use regionedit::trainer::{train_region_generator, PreparedSample, TrainConfig};
use regionedit::{AnchorConfig, Backends, Result};

const PALETTE: [[u8; 3]; 7] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

fn with_mock<T>(f: impl FnOnce(&Backends<'_>) -> Result<T>) -> Result<T> {
    let world = Arc::new(MockWorld::new(0));
    let (features, scorer, editor) = (world.features(), world.scorer(), world.editor());
    f(&Backends { features: &features, scorer: &scorer, editor: &editor })
}

/// RGBA overlay of the synthetic scene: attention heatmap blended over the
/// image, every anchor marked, and the proposals of anchor `focus` outlined.
pub fn render_proposals(anchors: usize, focus: usize) -> Result<Vec<u8>> {
    let scenario = SyntheticScenario::default();
    let image = scenario.image()?;
    let config = TrainConfig {
        anchors: AnchorConfig { count: anchors },
        ..TrainConfig::default()
    };
    let prepared = with_mock(|b| PreparedSample::new(&image, b, &config))?;
    let (h, w) = (image.height(), image.width());
    let stride = prepared.patch_stride;
    let attn = &prepared.attention;
    let (lo, hi) = attn
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);

    let mut rgba = vec![255u8; h * w * 4];
    for y in 0..h {
        for x in 0..w {
            let t = (attn.get((y / stride).min(attn.height() - 1), (x / stride).min(attn.width() - 1)) - lo) / span;
            // Stretch the dark scene so it is visible, then tint by attention.
            let p = image.pixel(y, x).map(|v| (v * 8.0).min(1.0));
            let px = [0.5 * p[0] + 0.5 * t, 0.5 * p[1] + 0.2 * t, 0.5 * p[2] + 0.5 * (1.0 - t)];
            let o = (y * w + x) * 4;
            for c in 0..3 {
                rgba[o + c] = (px[c].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }

    let mut put = |y: usize, x: usize, rgb: [u8; 3]| {
        if y < h && x < w {
            let o = (y * w + x) * 4;
            rgba[o..o + 3].copy_from_slice(&rgb);
        }
    };
    for a in &prepared.anchors {
        let (cy, cx) = (a.row * stride + stride / 2, a.col * stride + stride / 2);
        for d in 0..3 {
            for (dy, dx) in [(d, 0), (0, d), (d, d)] {
                put(cy + dy, cx + dx, [255, 255, 255]);
                put(cy.saturating_sub(dy), cx.saturating_sub(dx), [255, 255, 255]);
            }
        }
    }
    if let Some(boxes) = prepared.proposals.get(focus) {
        for (j, b) in boxes.iter().enumerate() {
            let rgb = PALETTE[j % PALETTE.len()];
            let (y0, x0) = (b.rect.r0 * stride, b.rect.c0 * stride);
            let (y1, x1) = ((b.rect.r1 + 1) * stride - 1, (b.rect.c1 + 1) * stride - 1);
            for x in x0..=x1 {
                put(y0, x, rgb);
                put(y1, x, rgb);
            }
            for y in y0..=y1 {
                put(y, x0, rgb);
                put(y, x1, rgb);
            }
        }
    }
    Ok(rgba)
}

#[derive(Debug, Serialize)]
pub struct Histogram {
    pub counts: Vec<usize>,
    pub frequencies: Vec<f64>,
    pub softmax: Vec<f64>,
}

/// Hard-selection counts over `draws` seeded Gumbel samples.
pub fn gumbel_histogram(logits: &[f64], draws: usize, seed: u64) -> Result<Histogram> {
    let mut counts = vec![0usize; logits.len()];
    for i in 0..draws {
        let s = sample_gumbel_selection(logits, regionedit::seed::derive_seed(seed, &[i as u64]))?;
        counts[s.hard_index] += 1;
    }
    let frequencies = counts.iter().map(|&c| c as f64 / draws.max(1) as f64).collect();
    Ok(Histogram { counts, frequencies, softmax: softmax(logits) })
}

#[derive(Debug, Serialize)]
pub struct TrainingTrace {
    /// Best proposal size by enumeration, 1-based.
    pub best_size: usize,
    pub enumerated_losses: Vec<f64>,
    /// Mean probabilities per size, before training and after each epoch.
    pub probabilities: Vec<Vec<f64>>,
}

/// Trains on the synthetic scene and reports how the mean selection
/// probabilities move toward the enumerated optimum.
pub fn train_synthetic(epochs: usize, seed: u64) -> Result<TrainingTrace> {
    let scenario = SyntheticScenario::default();
    let image = scenario.image()?;
    let prompt = scenario.prompt()?;
    let config = TrainConfig { epochs, seed, ..TrainConfig::default() };
    with_mock(|b| {
        let table = LossEnumeration::compute(&image, &prompt, b, &config)?;
        let best = table.per_anchor_best();
        let outcome = train_region_generator(&image, &prompt, b, &config)?;
        let mut probabilities = vec![outcome.initial_probabilities.clone()];
        probabilities.extend(outcome.epochs.iter().map(|e| e.mean_probabilities.clone()));
        Ok(TrainingTrace {
            best_size: best.first().map_or(0, |j| j + 1),
            enumerated_losses: table.losses[0].iter().map(|l| l.total).collect(),
            probabilities,
        })
    })
}

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> std::result::Result<String, JsValue> {
    serde_json::to_string(v).map_err(js_err)
}

/// Side length in pixels of the synthetic scene.
#[wasm_bindgen]
pub fn scene_size() -> usize {
    SyntheticScenario::default().size
}

#[wasm_bindgen(js_name = renderProposals)]
pub fn render_proposals_js(anchors: usize, focus: usize) -> std::result::Result<Vec<u8>, JsValue> {
    render_proposals(anchors, focus).map_err(js_err)
}

/// `logits` is a JSON array of numbers.
#[wasm_bindgen(js_name = gumbelHistogram)]
pub fn gumbel_histogram_js(logits: &str, draws: usize, seed: u32) -> std::result::Result<String, JsValue> {
    let logits: Vec<f64> = serde_json::from_str(logits).map_err(js_err)?;
    to_json(&gumbel_histogram(&logits, draws, u64::from(seed)).map_err(js_err)?)
}

#[wasm_bindgen(js_name = trainSynthetic)]
pub fn train_synthetic_js(epochs: usize, seed: u32) -> std::result::Result<String, JsValue> {
    to_json(&train_synthetic(epochs, u64::from(seed)).map_err(js_err)?)
}
