//! Per-sample optimization of the region generator and final candidate
//! selection.
//!
//! The editor is a black box, so no gradient reaches the network through the
//! edited image. Each step instead evaluates per-proposal losses, holds them
//! constant, and descends the surrogate `sum_j w_j * loss_j` where `w` is the
//! Gumbel-perturbed softmax; the forward choice is still the hard argmax.
//!
//! * [`GradientMode::FullEval`] edits and scores every proposal each step.
//! * [`GradientMode::SampledEma`] edits only the sampled proposal and fills the
//!   rest from exponential moving averages in the [`LossTable`].

use serde::{Deserialize, Serialize};

use crate::anchors::{select_anchors, AnchorConfig};
use crate::backends::{edit_image, extract_features, Backends, EditorBackend};
use crate::error::{Error, Result};
use crate::grid::{Anchor, AttentionMap, BoxProposal, FeatureMap};
use crate::image::{rasterize_mask, ImageBuffer, RegionMask};
use crate::losses::{LossBreakdown, LossContext, LossWeights, PromptSpec, QualityScore};
use crate::nn::Adam;
use crate::regions::{
    argmax, make_proposals, roi_pool, sample_gumbel_selection, softmax, surrogate_gradient,
    surrogate_value, ArchitectureDescriptor, ForwardTrace, ProposalConfig, RegionGeneratorParams,
    SelectionSample,
};
use crate::seed::{derive_seed, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    FullEval,
    SampledEma,
}

impl std::str::FromStr for GradientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-eval" => Ok(Self::FullEval),
            "sampled-ema" => Ok(Self::SampledEma),
            other => Err(Error::InvalidInput(format!(
                "unknown gradient mode {other:?} (expected full-eval or sampled-ema)"
            ))),
        }
    }
}

/// Hidden widths of the region generation network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkWidths {
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
}

impl Default for NetworkWidths {
    fn default() -> Self {
        Self {
            conv1: 256,
            conv2: 128,
            hidden: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub anchors: AnchorConfig,
    pub proposals: ProposalConfig,
    pub pool_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub alpha: f64,
    pub beta: f64,
    pub gradient_mode: GradientMode,
    pub ema_decay: f64,
    /// Optimizer steps per epoch; `None` means one per anchor.
    pub steps_per_epoch: Option<usize>,
    pub max_retries: usize,
    pub network: NetworkWidths,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            anchors: AnchorConfig::default(),
            proposals: ProposalConfig::default(),
            pool_size: 7,
            epochs: 5,
            learning_rate: 0.003,
            batch_size: 1,
            loss_weights: LossWeights::default(),
            alpha: 2.0,
            beta: 1.0,
            gradient_mode: GradientMode::FullEval,
            ema_decay: 0.9,
            steps_per_epoch: None,
            max_retries: 2,
            network: NetworkWidths::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(msg.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema decay must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.pool_size == 0 {
            return bad("pool size must be at least 1");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps per epoch must be at least 1");
        }
        if !(self.alpha.is_finite() && self.beta.is_finite()) {
            return bad("alpha and beta must be finite");
        }
        self.loss_weights.validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch.unwrap_or(self.anchors.count)
    }

    pub fn architecture(&self, feature_dim: usize) -> ArchitectureDescriptor {
        ArchitectureDescriptor {
            proposals: self.proposals.count,
            feature_dim,
            pool_size: self.pool_size,
            conv1_channels: self.network.conv1,
            conv2_channels: self.network.conv2,
            hidden: self.network.hidden,
        }
    }
}

/// Everything about an image that stays fixed while the generator trains.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub features: FeatureMap,
    pub attention: AttentionMap,
    pub anchors: Vec<Anchor>,
    /// `proposals[i][j]` is proposal `j + 1` of anchor `i`.
    pub proposals: Vec<Vec<BoxProposal>>,
    pub masks: Vec<Vec<RegionMask>>,
    /// Stacked pooled features, one network input per anchor.
    pub inputs: Vec<Vec<f32>>,
    pub patch_stride: usize,
}

impl PreparedSample {
    pub fn new(image: &ImageBuffer, backends: &Backends<'_>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let (features, attention) = extract_features(backends.features, image)?;
        let grid = features.grid();
        config.proposals.validate(grid)?;
        let anchors = select_anchors(&attention, config.anchors)?;
        let stride = backends.features.descriptor().patch_stride;
        let mut proposals = Vec::with_capacity(anchors.len());
        let mut masks = Vec::with_capacity(anchors.len());
        let mut inputs = Vec::with_capacity(anchors.len());
        for &anchor in &anchors {
            let boxes = make_proposals(anchor, config.proposals, grid)?;
            let mut input = Vec::new();
            let mut anchor_masks = Vec::with_capacity(boxes.len());
            for b in &boxes {
                input.extend(roi_pool(&features, b, config.pool_size)?.data);
                anchor_masks.push(rasterize_mask(b, stride, image.height(), image.width())?);
            }
            proposals.push(boxes);
            masks.push(anchor_masks);
            inputs.push(input);
        }
        Ok(Self {
            features,
            attention,
            anchors,
            proposals,
            masks,
            inputs,
            patch_stride: stride,
        })
    }

    /// Noise-free proposal probabilities for every anchor.
    pub fn probabilities(&self, params: &RegionGeneratorParams) -> Result<Vec<Vec<f64>>> {
        self.inputs
            .iter()
            .map(|input| Ok(softmax(&params.forward(input)?.logits_f64())))
            .collect()
    }
}

/// Per-(anchor, proposal) moving-average loss estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTable {
    pub estimates: Vec<Vec<Option<f64>>>,
    pub visits: Vec<Vec<u32>>,
}

impl LossTable {
    pub fn new(anchors: usize, proposals: usize) -> Self {
        Self {
            estimates: vec![vec![None; proposals]; anchors],
            visits: vec![vec![0; proposals]; anchors],
        }
    }

    pub fn record(&mut self, anchor: usize, proposal: usize, loss: f64, decay: f64) {
        let slot = &mut self.estimates[anchor][proposal];
        *slot = Some(match *slot {
            Some(prev) => decay * prev + (1.0 - decay) * loss,
            None => loss,
        });
        self.visits[anchor][proposal] += 1;
    }

    /// Row of estimates with unvisited entries set to the mean of the visited
    /// ones, or `None` if nothing has been visited.
    pub fn filled_row(&self, anchor: usize) -> Option<Vec<f64>> {
        let row = &self.estimates[anchor];
        let seen: Vec<f64> = row.iter().flatten().copied().collect();
        if seen.is_empty() {
            return None;
        }
        let mean = seen.iter().sum::<f64>() / seen.len() as f64;
        Some(row.iter().map(|v| v.unwrap_or(mean)).collect())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub anchor: usize,
    /// 1-based size index of the sampled proposal.
    pub j_star: usize,
    pub soft_weights: Vec<f64>,
    pub loss_parts: Option<LossBreakdown>,
    pub surrogate: Option<f64>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Noise-free proposal probabilities averaged over anchors, after the epoch.
    pub mean_probabilities: Vec<f64>,
    pub steps: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: RegionGeneratorParams,
    pub loss_table: LossTable,
    pub log: Vec<StepRecord>,
    pub initial_probabilities: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
    pub prepared: PreparedSample,
}

/// Region generator parameters plus optimizer state.
#[derive(Debug, Clone)]
pub struct RegionGenerator {
    pub params: RegionGeneratorParams,
    optimizer: Adam,
}

impl RegionGenerator {
    pub fn new(params: RegionGeneratorParams, learning_rate: f64) -> Self {
        let sizes: Vec<usize> = params.tensors.iter().map(Vec::len).collect();
        Self {
            params,
            optimizer: Adam::new(learning_rate as f32, &sizes),
        }
    }

    /// Optimizer updates applied so far.
    pub fn steps(&self) -> usize {
        self.optimizer.steps() as usize
    }

    /// Parameter gradients of the surrogate for one selection, or `None` if
    /// any entry is non-finite.
    pub fn surrogate_gradients(
        &self,
        trace: &ForwardTrace,
        selection: &SelectionSample,
        losses: &[f64],
    ) -> Option<Vec<Vec<f32>>> {
        let dlogits: Vec<f32> = surrogate_gradient(&selection.weights, losses)
            .into_iter()
            .map(|g| g as f32)
            .collect();
        if dlogits.iter().any(|g| !g.is_finite()) {
            return None;
        }
        let grads = self.params.backward(trace, &dlogits);
        grads.iter().flatten().all(|g| g.is_finite()).then_some(grads)
    }

    pub fn apply(&mut self, grads: &[Vec<f32>]) {
        let refs: Vec<&Vec<f32>> = grads.iter().collect();
        let mut params: Vec<&mut Vec<f32>> = self.params.tensors.iter_mut().collect();
        self.optimizer.update(&mut params, &refs);
    }

    /// One Adam step on `sum_j w_j * losses_j` with the losses held constant.
    ///
    /// Returns `false` and leaves the parameters untouched when the gradient
    /// is not finite.
    pub fn surrogate_step(
        &mut self,
        trace: &ForwardTrace,
        selection: &SelectionSample,
        losses: &[f64],
    ) -> bool {
        match self.surrogate_gradients(trace, selection, losses) {
            Some(g) => {
                self.apply(&g);
                true
            }
            None => false,
        }
    }
}

/// Calls the editor, retrying retryable failures up to `retries` extra times.
pub fn edit_with_retry(
    editor: &dyn EditorBackend,
    image: &ImageBuffer,
    mask: &RegionMask,
    prompt: &str,
    seed: u64,
    retries: usize,
) -> Result<ImageBuffer> {
    let mut attempt = 0;
    loop {
        match edit_image(editor, image, mask, prompt, seed) {
            Err(e) if e.is_retryable() && attempt < retries => attempt += 1,
            other => return other,
        }
    }
}

fn evaluate_proposals(
    image: &ImageBuffer,
    prompt: &PromptSpec,
    masks: &[&RegionMask],
    seed: u64,
    backends: &Backends<'_>,
    ctx: &LossContext<'_>,
    retries: usize,
) -> Vec<Result<LossBreakdown>> {
    let eval = |mask: &&RegionMask| {
        let edited = edit_with_retry(backends.editor, image, mask, &prompt.prompt, seed, retries)?;
        ctx.losses(&edited)
    };
    #[cfg(feature = "parallel")]
    {
        let serial = backends.editor.serial_only()
            || backends.scorer.descriptor().serial_only;
        if !serial && masks.len() > 1 {
            use rayon::prelude::*;
            return masks.par_iter().map(eval).collect();
        }
    }
    masks.iter().map(eval).collect()
}

/// Trains the region generator for one image and prompt.
pub fn train_region_generator(
    image: &ImageBuffer,
    prompt: &PromptSpec,
    backends: &Backends<'_>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let prepared = PreparedSample::new(image, backends, config)?;
    train_prepared(image, prompt, backends, config, prepared)
}

pub fn initial_params(config: &TrainConfig, feature_dim: usize) -> Result<RegionGeneratorParams> {
    RegionGeneratorParams::init(config.architecture(feature_dim), derive_seed(config.seed, &[tag::INIT]))
}

pub fn train_prepared(
    image: &ImageBuffer,
    prompt: &PromptSpec,
    backends: &Backends<'_>,
    config: &TrainConfig,
    prepared: PreparedSample,
) -> Result<TrainOutcome> {
    config.validate()?;
    let ctx = LossContext::new(
        backends.scorer,
        image,
        prompt,
        config.loss_weights,
        config.alpha,
        config.beta,
    )?;
    let k = prepared.anchors.len();
    let m = config.proposals.count;
    let mut generator = RegionGenerator::new(
        initial_params(config, prepared.features.channels())?,
        config.learning_rate,
    );
    let mut table = LossTable::new(k, m);
    let mut log = Vec::new();
    let mut summaries = Vec::with_capacity(config.epochs);
    let initial_probabilities = mean_rows(&prepared.probabilities(&generator.params)?);
    let steps_per_epoch = config.steps_per_epoch();
    let mut global_step = 0usize;
    let mut applied_total = 0usize;

    for epoch in 0..config.epochs {
        let mut skipped = 0;
        for step in 0..steps_per_epoch {
            let mut batch_grads: Option<Vec<Vec<f32>>> = None;
            let mut batch_count = 0usize;
            for b in 0..config.batch_size {
                let anchor = (step * config.batch_size + b) % k;
                let trace = generator.params.forward(&prepared.inputs[anchor])?;
                let gumbel_seed =
                    derive_seed(config.seed, &[tag::GUMBEL, anchor as u64, global_step as u64]);
                let selection = sample_gumbel_selection(&trace.logits_f64(), gumbel_seed)?;
                let edit_seed =
                    derive_seed(config.seed, &[tag::EDIT, anchor as u64, global_step as u64]);
                let mut record = StepRecord {
                    epoch,
                    step: global_step,
                    anchor,
                    j_star: selection.size_index(),
                    soft_weights: selection.weights.clone(),
                    loss_parts: None,
                    surrogate: None,
                    seed: edit_seed,
                    skipped: None,
                };

                let anchor_masks = &prepared.masks[anchor];
                let losses = match config.gradient_mode {
                    GradientMode::FullEval => {
                        let all: Vec<&RegionMask> = anchor_masks.iter().collect();
                        evaluate_proposals(
                            image, prompt, &all, edit_seed, backends, &ctx, config.max_retries,
                        )
                        .into_iter()
                        .collect::<Result<Vec<_>>>()
                        .map(|parts| {
                            for (j, p) in parts.iter().enumerate() {
                                table.record(anchor, j, p.total, config.ema_decay);
                            }
                            record.loss_parts = Some(parts[selection.hard_index]);
                            parts.iter().map(|p| p.total).collect::<Vec<f64>>()
                        })
                    }
                    GradientMode::SampledEma => {
                        let chosen = [&anchor_masks[selection.hard_index]];
                        evaluate_proposals(
                            image, prompt, &chosen, edit_seed, backends, &ctx, config.max_retries,
                        )
                        .remove(0)
                        .map(|parts| {
                            table.record(anchor, selection.hard_index, parts.total, config.ema_decay);
                            record.loss_parts = Some(parts);
                            table.filled_row(anchor).expect("row was just recorded")
                        })
                    }
                };

                match losses {
                    Ok(losses) => {
                        record.surrogate = Some(surrogate_value(&selection.weights, &losses));
                        match generator.surrogate_gradients(&trace, &selection, &losses) {
                            Some(g) => {
                                batch_count += 1;
                                match &mut batch_grads {
                                    None => batch_grads = Some(g),
                                    Some(acc) => {
                                        for (a, x) in acc.iter_mut().zip(&g) {
                                            for (p, q) in a.iter_mut().zip(x) {
                                                *p += q;
                                            }
                                        }
                                    }
                                }
                            }
                            None => record.skipped = Some("non-finite gradient".into()),
                        }
                    }
                    Err(e) if e.is_backend() => record.skipped = Some(e.to_string()),
                    Err(e) => return Err(e),
                }
                if record.skipped.is_some() {
                    skipped += 1;
                }
                log.push(record);
            }
            if let Some(mut grads) = batch_grads {
                let scale = 1.0 / batch_count as f32;
                grads.iter_mut().flatten().for_each(|g| *g *= scale);
                generator.apply(&grads);
                applied_total += 1;
            }
            global_step += 1;
        }
        summaries.push(EpochSummary {
            epoch,
            mean_probabilities: mean_rows(&prepared.probabilities(&generator.params)?),
            steps: steps_per_epoch,
            skipped,
        });
    }

    if global_step > 0 && applied_total == 0 {
        return Err(Error::AllStepsSkipped);
    }
    Ok(TrainOutcome {
        params: generator.params,
        loss_table: table,
        log,
        initial_probabilities,
        epochs: summaries,
        prepared,
    })
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let m = rows.first().map_or(0, Vec::len);
    let mut out = vec![0.0; m];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= rows.len() as f64);
    out
}

/// One anchor's inference result.
#[derive(Debug, Clone)]
pub struct EditCandidate {
    pub anchor_index: usize,
    pub proposal: BoxProposal,
    pub probabilities: Vec<f64>,
    pub mask: RegionMask,
    pub edited: ImageBuffer,
    pub losses: LossBreakdown,
    pub quality: QualityScore,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub candidates: Vec<EditCandidate>,
    /// `(anchor index, error)` for anchors whose edit failed.
    pub failures: Vec<(usize, String)>,
    /// Index into `candidates`.
    pub winner: usize,
}

impl Inference {
    pub fn winner(&self) -> &EditCandidate {
        &self.candidates[self.winner]
    }
}

/// Index of the highest score, ties to the lowest index.
pub fn select_winner(scores: &[f64]) -> Option<usize> {
    (!scores.is_empty()).then(|| argmax(scores))
}

/// Edits each anchor's most probable proposal and picks the best by quality
/// score. No Gumbel noise is used here.
pub fn infer_best_edit(
    image: &ImageBuffer,
    prompt: &PromptSpec,
    params: &RegionGeneratorParams,
    backends: &Backends<'_>,
    config: &TrainConfig,
) -> Result<Inference> {
    let prepared = PreparedSample::new(image, backends, config)?;
    infer_prepared(image, prompt, params, backends, config, &prepared)
}

pub fn infer_prepared(
    image: &ImageBuffer,
    prompt: &PromptSpec,
    params: &RegionGeneratorParams,
    backends: &Backends<'_>,
    config: &TrainConfig,
    prepared: &PreparedSample,
) -> Result<Inference> {
    let ctx = LossContext::new(
        backends.scorer,
        image,
        prompt,
        config.loss_weights,
        config.alpha,
        config.beta,
    )?;
    let choices = prepared
        .probabilities(params)?
        .into_iter()
        .map(|p| (argmax(&p), p))
        .collect::<Vec<_>>();
    let boxes: Vec<(BoxProposal, RegionMask)> = choices
        .iter()
        .enumerate()
        .map(|(i, (j, _))| (prepared.proposals[i][*j], prepared.masks[i][*j].clone()))
        .collect();
    infer_boxes(image, prompt, backends, config, &ctx, boxes, choices.into_iter().map(|(_, p)| p).collect())
}

/// Edits and scores one fixed box per anchor; shared with the baselines.
pub fn infer_boxes(
    image: &ImageBuffer,
    prompt: &PromptSpec,
    backends: &Backends<'_>,
    config: &TrainConfig,
    ctx: &LossContext<'_>,
    boxes: Vec<(BoxProposal, RegionMask)>,
    probabilities: Vec<Vec<f64>>,
) -> Result<Inference> {
    let mut candidates = Vec::new();
    let mut failures = Vec::new();
    for (i, ((proposal, mask), probs)) in boxes.into_iter().zip(probabilities).enumerate() {
        let seed = derive_seed(config.seed, &[tag::INFER, i as u64]);
        let outcome = edit_with_retry(
            backends.editor,
            image,
            &mask,
            &prompt.prompt,
            seed,
            config.max_retries,
        )
        .and_then(|edited| Ok((ctx.losses(&edited)?, ctx.score(&edited)?, edited)));
        match outcome {
            Ok((losses, quality, edited)) => candidates.push(EditCandidate {
                anchor_index: i,
                proposal,
                probabilities: probs,
                mask,
                edited,
                losses,
                quality,
                seed,
            }),
            Err(e) if e.is_backend() => failures.push((i, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    let scores: Vec<f64> = candidates.iter().map(|c| c.quality.s).collect();
    let winner = select_winner(&scores).ok_or(Error::AllCandidatesFailed)?;
    Ok(Inference {
        candidates,
        failures,
        winner,
    })
}
