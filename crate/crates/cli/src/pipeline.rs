//! The `edit`, `inspect` and `eval` commands.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use regionedit::backends::mock::{MockEditor, MockFeatures, MockScorer, MockWorld, PATCH_STRIDE};
use regionedit::backends::BackendId;
use regionedit::eval::{anchor_sweep, loss_sweep, proposal_sweep, run_eval, EvalItem, EvalReport, EvalVariant, Method};
use regionedit::synthetic::SyntheticScenario;
use regionedit::trainer::{
    infer_prepared, initial_params, train_prepared, EditCandidate, GradientMode, Inference, PreparedSample,
    StepRecord,
};
use regionedit::{
    Anchor, Backends, GridRect, ImageBuffer, LossBreakdown, PromptSpec, QualityScore, RegionGeneratorParams,
    TrainConfig,
};

use crate::cache::{Cache, CachedEditor, CachedFeatures};
use crate::config::{BackendKind, Settings};
use crate::error::{CliError, CliResult};
use crate::io::{create_dir, read_image, write_json, write_png, write_rgba_png, Crop};
use crate::render;

pub const SIDECAR_FORMAT: &str = "regionedit-sidecar/1";
pub const MANIFEST_FORMAT: &str = "regionedit-manifest/1";

/// Mock backends plus the optional cache layer in front of them.
pub struct Stack {
    features: MockFeatures,
    scorer: MockScorer,
    editor: MockEditor,
    cache: Option<Cache>,
}

impl Stack {
    pub fn new(settings: &Settings) -> CliResult<Self> {
        if settings.backend == BackendKind::Real {
            return Err(CliError::backend(
                "real backends are not bundled in this build; implement the adapter \
                 contracts in regionedit::backends::adapters and link them in",
            ));
        }
        let world = Arc::new(MockWorld::new(settings.mock_seed));
        let cache = if settings.use_cache { Some(Cache::open(&settings.cache_dir)?) } else { None };
        Ok(Self { features: world.features(), scorer: world.scorer(), editor: world.editor(), cache })
    }

    pub fn stride(&self) -> usize {
        PATCH_STRIDE
    }

    pub fn editor_calls(&self) -> usize {
        self.editor.calls()
    }

    pub fn cache(&self) -> Option<&Cache> {
        self.cache.as_ref()
    }
}

/// Runs `f` with backends, routed through the cache when enabled.
pub fn with_backends<T>(stack: &Stack, f: impl FnOnce(&Backends<'_>) -> T) -> T {
    match &stack.cache {
        Some(cache) => {
            let features = CachedFeatures::new(&stack.features, cache);
            let editor = CachedEditor::new(&stack.editor, cache);
            f(&Backends { features: &features, scorer: &stack.scorer, editor: &editor })
        }
        None => f(&Backends { features: &stack.features, scorer: &stack.scorer, editor: &stack.editor }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub file: String,
    pub height: usize,
    pub width: usize,
}

/// Serialized edit candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub anchor_index: usize,
    pub anchor: Anchor,
    pub size_index: usize,
    pub grid_rect: GridRect,
    /// Inclusive `[y0, x0, y1, x1]` of the edited pixels.
    pub pixel_bounds: [usize; 4],
    pub probabilities: Vec<f64>,
    pub losses: LossBreakdown,
    pub quality: QualityScore,
    pub edit_seed: u64,
}

impl From<&EditCandidate> for CandidateRecord {
    fn from(c: &EditCandidate) -> Self {
        let (y0, x0, y1, x1) = c.mask.bounds();
        Self {
            anchor_index: c.anchor_index,
            anchor: c.proposal.anchor,
            size_index: c.proposal.size_index,
            grid_rect: c.proposal.rect,
            pixel_bounds: [y0, x0, y1, x1],
            probabilities: c.probabilities.clone(),
            losses: c.losses,
            quality: c.quality,
            edit_seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub source: SourceInfo,
    pub output: String,
    pub prompt: String,
    pub roi_text: String,
    pub roi_text_defaulted: bool,
    pub untrained: bool,
    pub master_seed: u64,
    pub winner: CandidateRecord,
    pub failed_anchors: Vec<(usize, String)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DesignFlags {
    pub gradient_mode: GradientMode,
    pub gradient_routing: &'static str,
    pub parameter_sharing: &'static str,
    pub weight_scaling: &'static str,
    pub roi_text: String,
    pub roi_text_defaulted: bool,
    pub anchor_ties: &'static str,
    pub winner_ties: &'static str,
    pub inference_noise: &'static str,
    pub attention: &'static str,
}

impl DesignFlags {
    fn new(config: &TrainConfig, prompt: &PromptSpec) -> Self {
        let (roi, defaulted) = prompt.resolved_roi();
        Self {
            gradient_mode: config.gradient_mode,
            gradient_routing: "surrogate sum_j w_j * loss_j with per-proposal losses detached",
            parameter_sharing: "one parameter set shared by all anchors",
            weight_scaling: "1/sqrt(fan_in) applied in the forward pass",
            roi_text: roi.to_string(),
            roi_text_defaulted: defaulted,
            anchor_ties: "descending score, then ascending row-major index",
            winner_ties: "highest quality score, then lowest anchor index",
            inference_noise: "none; argmax of logits",
            attention: "backend class-token attention (mock: mean patch intensity)",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub format: &'static str,
    pub tool_version: &'static str,
    pub command: String,
    pub started: String,
    pub finished: String,
    pub input: InputRecord,
    pub config: TrainConfig,
    pub backend: BackendKind,
    pub mock_seed: u64,
    pub backends: Vec<BackendId>,
    pub master_seed: u64,
    pub decisions: DesignFlags,
    pub untrained: bool,
    pub cache_enabled: bool,
    pub editor_calls: usize,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
    pub crop: Crop,
}

pub struct EditRequest<'a> {
    pub image: &'a Path,
    pub prompt: &'a str,
    pub untrained: bool,
}

pub struct Loaded {
    pub image: ImageBuffer,
    pub crop: Crop,
    pub prompt: PromptSpec,
    pub input: InputRecord,
    pub source: SourceInfo,
}

pub fn load(req: &EditRequest<'_>, settings: &Settings, stride: usize) -> CliResult<Loaded> {
    let bytes = std::fs::read(req.image).map_err(|e| CliError::io(req.image, e))?;
    let (image, crop) = read_image(req.image, stride)?;
    let mut prompt = PromptSpec::new(req.prompt).map_err(|e| CliError::usage(format!("--prompt: {e}")))?;
    if let Some(roi) = &settings.roi_text {
        prompt = prompt.with_roi(roi.as_str()).map_err(|e| CliError::usage(format!("--roi-text: {e}")))?;
    }
    let file = req
        .image
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Loaded {
        source: SourceInfo { file, height: image.height(), width: image.width() },
        input: InputRecord {
            path: req.image.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            crop,
        },
        image,
        crop,
        prompt,
    })
}

/// Trained (or initial) parameters, the training log and inference results.
pub struct RunResult {
    pub params: RegionGeneratorParams,
    pub log: Vec<StepRecord>,
    pub prepared: PreparedSample,
    pub inference: Inference,
}

pub fn run_pipeline(loaded: &Loaded, settings: &Settings, untrained: bool, backends: &Backends<'_>) -> CliResult<RunResult> {
    let config = &settings.train;
    let prepared = PreparedSample::new(&loaded.image, backends, config)?;
    let (params, log, prepared) = if untrained {
        (initial_params(config, prepared.features.channels())?, Vec::new(), prepared)
    } else {
        let out = train_prepared(&loaded.image, &loaded.prompt, backends, config, prepared)?;
        (out.params, out.log, out.prepared)
    };
    let inference = infer_prepared(&loaded.image, &loaded.prompt, &params, backends, config, &prepared)?;
    Ok(RunResult { params, log, prepared, inference })
}

fn write_log(path: &Path, log: &[StepRecord]) -> CliResult<()> {
    let mut out = Vec::new();
    for r in log {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| CliError::io(path, e))
}

fn manifest(
    command: &str,
    started: String,
    loaded: &Loaded,
    settings: &Settings,
    stack: &Stack,
    untrained: bool,
    outputs: Vec<String>,
) -> RunManifest {
    let backends = with_backends(stack, |b| b.ids());
    RunManifest {
        format: MANIFEST_FORMAT,
        tool_version: env!("CARGO_PKG_VERSION"),
        command: command.to_string(),
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        input: loaded.input.clone(),
        config: settings.train,
        backend: settings.backend,
        mock_seed: settings.mock_seed,
        backends,
        master_seed: settings.train.seed,
        decisions: DesignFlags::new(&settings.train, &loaded.prompt),
        untrained,
        cache_enabled: stack.cache.is_some(),
        editor_calls: stack.editor_calls(),
        outputs,
    }
}

fn sidecar(loaded: &Loaded, settings: &Settings, untrained: bool, inf: &Inference) -> Sidecar {
    let (roi, defaulted) = loaded.prompt.resolved_roi();
    Sidecar {
        format: SIDECAR_FORMAT.into(),
        source: loaded.source.clone(),
        output: "edited.png".into(),
        prompt: loaded.prompt.prompt.clone(),
        roi_text: roi.to_string(),
        roi_text_defaulted: defaulted,
        untrained,
        master_seed: settings.train.seed,
        winner: CandidateRecord::from(inf.winner()),
        failed_anchors: inf.failures.clone(),
    }
}

/// Writes edited.png, sidecar.json, train_log.jsonl, params.bin and
/// manifest.json into the output directory.
pub fn cmd_edit(req: &EditRequest<'_>, settings: &Settings) -> CliResult<Sidecar> {
    let started = chrono::Utc::now().to_rfc3339();
    let stack = Stack::new(settings)?;
    let loaded = load(req, settings, stack.stride())?;
    let run = with_backends(&stack, |b| run_pipeline(&loaded, settings, req.untrained, b))?;
    let out = &settings.out;
    create_dir(out)?;
    write_png(&out.join("edited.png"), &run.inference.winner().edited)?;
    let side = sidecar(&loaded, settings, req.untrained, &run.inference);
    write_json(&out.join("sidecar.json"), &side)?;
    write_log(&out.join("train_log.jsonl"), &run.log)?;
    let params_path = out.join("params.bin");
    std::fs::write(&params_path, run.params.to_bytes()).map_err(|e| CliError::io(&params_path, e))?;
    let outputs = ["edited.png", "sidecar.json", "train_log.jsonl", "params.bin"].map(String::from).to_vec();
    write_json(
        &out.join("manifest.json"),
        &manifest("edit", started, &loaded, settings, &stack, req.untrained, outputs),
    )?;
    Ok(side)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectCandidate {
    pub rank: usize,
    pub file: String,
    #[serde(flatten)]
    pub candidate: CandidateRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorProposals {
    pub anchor_index: usize,
    pub anchor: Anchor,
    /// Inclusive pixel bounds of proposals `1..=M`.
    pub proposal_bounds: Vec<[usize; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub source: SourceInfo,
    pub prompt: String,
    pub roi_text: String,
    pub heatmap: String,
    pub proposals_overlay: String,
    pub selected_overlay: String,
    pub anchors: Vec<AnchorProposals>,
    /// Sorted by quality score, best first.
    pub candidates: Vec<InspectCandidate>,
    pub failed_anchors: Vec<(usize, String)>,
}

pub fn cmd_inspect(req: &EditRequest<'_>, settings: &Settings) -> CliResult<InspectReport> {
    let started = chrono::Utc::now().to_rfc3339();
    let stack = Stack::new(settings)?;
    let loaded = load(req, settings, stack.stride())?;
    let run = with_backends(&stack, |b| run_pipeline(&loaded, settings, req.untrained, b))?;
    let out = &settings.out;
    let panels = out.join("candidates");
    create_dir(&panels)?;

    let stride = stack.stride();
    write_rgba_png(&out.join("heatmap.png"), &render::heatmap(&loaded.image, &run.prepared.attention, stride))?;

    let mut proposals_img = render::to_rgba(&loaded.image);
    let mut anchors = Vec::new();
    for (i, masks) in run.prepared.masks.iter().enumerate() {
        let bounds: Vec<[usize; 4]> = masks
            .iter()
            .map(|m| {
                let (y0, x0, y1, x1) = m.bounds();
                [y0, x0, y1, x1]
            })
            .collect();
        for b in &bounds {
            render::draw_rect(&mut proposals_img, (b[0], b[1], b[2], b[3]), render::palette(i));
        }
        anchors.push(AnchorProposals { anchor_index: i, anchor: run.prepared.anchors[i], proposal_bounds: bounds });
    }
    write_rgba_png(&out.join("proposals.png"), &proposals_img)?;

    let mut selected_img = render::to_rgba(&loaded.image);
    let mut candidates: Vec<InspectCandidate> = Vec::new();
    for c in &run.inference.candidates {
        let record = CandidateRecord::from(c);
        let [y0, x0, y1, x1] = record.pixel_bounds;
        render::fill_rect(&mut selected_img, (y0, x0, y1, x1), render::palette(c.anchor_index));
        let file = format!("candidates/anchor_{}.png", c.anchor_index);
        write_png(&out.join(&file), &c.edited)?;
        candidates.push(InspectCandidate { rank: 0, file, candidate: record });
    }
    write_rgba_png(&out.join("selected.png"), &selected_img)?;
    candidates.sort_by(|a, b| {
        b.candidate
            .quality
            .s
            .total_cmp(&a.candidate.quality.s)
            .then(a.candidate.anchor_index.cmp(&b.candidate.anchor_index))
    });
    for (rank, c) in candidates.iter_mut().enumerate() {
        c.rank = rank + 1;
    }
    let (roi, _) = loaded.prompt.resolved_roi();
    let report = InspectReport {
        source: loaded.source.clone(),
        prompt: loaded.prompt.prompt.clone(),
        roi_text: roi.to_string(),
        heatmap: "heatmap.png".into(),
        proposals_overlay: "proposals.png".into(),
        selected_overlay: "selected.png".into(),
        anchors,
        candidates,
        failed_anchors: run.inference.failures.clone(),
    };
    write_json(&out.join("inspect.json"), &report)?;
    let outputs = ["heatmap.png", "proposals.png", "selected.png", "inspect.json", "candidates/"]
        .map(String::from)
        .to_vec();
    write_json(
        &out.join("manifest.json"),
        &manifest("inspect", started, &loaded, settings, &stack, req.untrained, outputs),
    )?;
    Ok(report)
}

/// Entry of an eval manifest. Image paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub name: Option<String>,
    pub image: PathBuf,
    pub prompt: String,
    pub roi_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalManifest {
    pub items: Vec<ManifestItem>,
}

pub struct EvalRequest {
    pub manifest: Option<PathBuf>,
    pub synthetic: bool,
    pub methods: Vec<Method>,
    pub sweep_proposals: Vec<usize>,
    pub sweep_anchors: Vec<usize>,
    pub sweep_losses: bool,
}

pub fn synthetic_item() -> CliResult<EvalItem> {
    let scenario = SyntheticScenario::default();
    Ok(EvalItem { name: "synthetic".into(), image: scenario.image()?, prompt: scenario.prompt()? })
}

fn load_items(req: &EvalRequest, settings: &Settings, stride: usize) -> CliResult<Vec<EvalItem>> {
    let mut items = Vec::new();
    if let Some(path) = &req.manifest {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let manifest: EvalManifest = serde_json::from_str(&text).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for (i, entry) in manifest.items.iter().enumerate() {
            let image_path = base.join(&entry.image);
            let (image, _) = read_image(&image_path, stride)?;
            let mut prompt = PromptSpec::new(entry.prompt.as_str())
                .map_err(|e| CliError::input(format!("{}: item {i}: {e}", path.display())))?;
            if let Some(roi) = entry.roi_text.as_ref().or(settings.roi_text.as_ref()) {
                prompt = prompt.with_roi(roi.as_str())?;
            }
            let name = entry.name.clone().unwrap_or_else(|| entry.image.display().to_string());
            items.push(EvalItem { name, image, prompt });
        }
    }
    if req.synthetic {
        items.push(synthetic_item()?);
    }
    if items.is_empty() {
        return Err(CliError::usage("eval needs --manifest FILE and/or --synthetic with at least one image"));
    }
    Ok(items)
}

pub fn eval_variants(req: &EvalRequest, base: &TrainConfig) -> Vec<EvalVariant> {
    let mut variants: Vec<EvalVariant> = req.methods.iter().map(|&m| EvalVariant::new(m, *base)).collect();
    if !req.sweep_proposals.is_empty() {
        variants.extend(proposal_sweep(base, &req.sweep_proposals));
    }
    if !req.sweep_anchors.is_empty() {
        variants.extend(anchor_sweep(base, &req.sweep_anchors));
    }
    if req.sweep_losses {
        variants.extend(loss_sweep(base));
    }
    variants
}

/// Writes report.csv and report.json into the output directory.
pub fn cmd_eval(req: &EvalRequest, settings: &Settings) -> CliResult<EvalReport> {
    let stack = Stack::new(settings)?;
    let items = load_items(req, settings, stack.stride())?;
    let variants = eval_variants(req, &settings.train);
    if variants.is_empty() {
        return Err(CliError::usage("no methods or sweeps selected"));
    }
    let report = with_backends(&stack, |b| run_eval(&items, &variants, b, settings.jobs))?;
    create_dir(&settings.out)?;
    let csv_path = settings.out.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    let csv_err = |e: csv::Error| CliError::io(&csv_path, e);
    w.write_record(["method", "s_t2i", "s_i2i", "n_images", "failures"]).map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([
            r.method.clone(),
            fmt(r.mean_s_t2i),
            fmt(r.mean_s_i2i),
            r.n_images.to_string(),
            r.failures.len().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    write_json(&settings.out.join("report.json"), &report)?;
    Ok(report)
}

pub fn print_report(report: &EvalReport, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{:<24} {:>8} {:>8} {:>4}", "method", "S_t2i", "S_i2i", "n")?;
    for r in &report.rows {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        writeln!(out, "{:<24} {:>8} {:>8} {:>4}", r.method, f(r.mean_s_t2i), f(r.mean_s_i2i), r.n_images)?;
    }
    Ok(())
}
