//! Evaluation harness: runs methods and ablation variants over a set of
//! images and reports mean text and image similarity of the winning edits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorConfig;
use crate::backends::{extract_features, Backends};
use crate::baselines::{baseline_dino_random, baseline_random_random};
use crate::error::{Error, Result};
use crate::image::{rasterize_mask, ImageBuffer};
use crate::losses::{LossContext, LossWeights, PromptSpec};
use crate::regions::ProposalConfig;
use crate::seed::{derive_seed, tag};
use crate::trainer::{infer_boxes, infer_prepared, train_prepared, Inference, PreparedSample, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ours,
    RandomRandom,
    DinoRandom,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ours => "ours",
            Self::RandomRandom => "random-random",
            Self::DinoRandom => "dino-random",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Self::Ours),
            "random-random" => Ok(Self::RandomRandom),
            "dino-random" => Ok(Self::DinoRandom),
            other => Err(Error::InvalidInput(format!("unknown method {other:?}"))),
        }
    }
}

/// One report row's worth of work: a method under one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalVariant {
    pub label: String,
    pub method: Method,
    pub config: TrainConfig,
}

impl EvalVariant {
    pub fn new(method: Method, config: TrainConfig) -> Self {
        Self {
            label: method.name().to_string(),
            method,
            config,
        }
    }
}

/// `ours` with each proposal count in `counts`.
pub fn proposal_sweep(base: &TrainConfig, counts: &[usize]) -> Vec<EvalVariant> {
    counts
        .iter()
        .map(|&m| EvalVariant {
            label: format!("ours M={m}"),
            method: Method::Ours,
            config: TrainConfig {
                proposals: ProposalConfig {
                    count: m,
                    ..base.proposals
                },
                ..*base
            },
        })
        .collect()
}

/// `ours` with each anchor count in `counts`.
pub fn anchor_sweep(base: &TrainConfig, counts: &[usize]) -> Vec<EvalVariant> {
    counts
        .iter()
        .map(|&k| EvalVariant {
            label: format!("ours K={k}"),
            method: Method::Ours,
            config: TrainConfig {
                anchors: AnchorConfig { count: k },
                ..*base
            },
        })
        .collect()
}

/// `ours` with the structural and directional terms switched off in turn.
pub fn loss_sweep(base: &TrainConfig) -> Vec<EvalVariant> {
    let w = |structural: f64, directional: f64| LossWeights {
        clip: 1.0,
        structural,
        directional,
    };
    [
        ("ours clip", w(0.0, 0.0)),
        ("ours clip+str", w(1.0, 0.0)),
        ("ours clip+dir", w(0.0, 1.0)),
        ("ours clip+str+dir", w(1.0, 1.0)),
    ]
    .into_iter()
    .map(|(label, loss_weights)| EvalVariant {
        label: label.to_string(),
        method: Method::Ours,
        config: TrainConfig {
            loss_weights,
            ..*base
        },
    })
    .collect()
}

#[derive(Debug, Clone)]
pub struct EvalItem {
    pub name: String,
    pub image: ImageBuffer,
    pub prompt: PromptSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub item: String,
    pub s_t2i: f64,
    pub s_i2i: f64,
    pub anchor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    /// `None` when every item failed.
    pub mean_s_t2i: Option<f64>,
    pub mean_s_i2i: Option<f64>,
    pub n_images: usize,
    pub items: Vec<ItemResult>,
    /// `(item, error)` for items that could not be evaluated.
    pub failures: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut out = String::from("method,s_t2i,s_i2i,n_images,failures\n");
        for r in &self.rows {
            out.push_str(&format!(
                "\"{}\",{},{},{},{}\n",
                r.method.replace('"', "\"\""),
                fmt(r.mean_s_t2i),
                fmt(r.mean_s_i2i),
                r.n_images,
                r.failures.len()
            ));
        }
        out
    }

    pub fn row(&self, method: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Runs one variant on one image. `seed` replaces the configured master seed.
pub fn run_item(
    item: &EvalItem,
    variant: &EvalVariant,
    backends: &Backends<'_>,
    seed: u64,
) -> Result<Inference> {
    let config = TrainConfig { seed, ..variant.config };
    match variant.method {
        Method::Ours => {
            let prepared = PreparedSample::new(&item.image, backends, &config)?;
            let trained = train_prepared(&item.image, &item.prompt, backends, &config, prepared)?;
            infer_prepared(
                &item.image,
                &item.prompt,
                &trained.params,
                backends,
                &config,
                &trained.prepared,
            )
        }
        Method::RandomRandom | Method::DinoRandom => {
            config.validate()?;
            let (_, attention) = extract_features(backends.features, &item.image)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag::BASELINE]));
            let boxes = if variant.method == Method::DinoRandom {
                baseline_dino_random(&attention, config.anchors, &mut rng)?
            } else {
                (0..config.anchors.count)
                    .map(|_| baseline_random_random(&attention, &mut rng))
                    .collect::<Result<Vec<_>>>()?
            };
            let stride = backends.features.descriptor().patch_stride;
            let pairs = boxes
                .into_iter()
                .map(|b| {
                    let mask = rasterize_mask(&b, stride, item.image.height(), item.image.width())?;
                    Ok((b, mask))
                })
                .collect::<Result<Vec<_>>>()?;
            let ctx = LossContext::new(
                backends.scorer,
                &item.image,
                &item.prompt,
                config.loss_weights,
                config.alpha,
                config.beta,
            )?;
            let n = pairs.len();
            infer_boxes(&item.image, &item.prompt, backends, &config, &ctx, pairs, vec![Vec::new(); n])
        }
    }
}

/// Evaluates every variant on every item. Items are processed up to `jobs`
/// at a time; results are reduced in item order so the report does not
/// depend on scheduling.
pub fn run_eval(
    items: &[EvalItem],
    variants: &[EvalVariant],
    backends: &Backends<'_>,
    jobs: usize,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::InvalidInput("evaluation needs at least one image".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let run = |(i, item): (usize, &EvalItem)| {
            let seed = derive_seed(variant.config.seed, &[tag::SAMPLE, i as u64]);
            run_item(item, variant, backends, seed)
        };
        let results = map_items(items, jobs, run);
        let mut done = Vec::new();
        let mut failures = Vec::new();
        for (item, result) in items.iter().zip(results) {
            match result {
                Ok(inf) => {
                    let w = inf.winner();
                    done.push(ItemResult {
                        item: item.name.clone(),
                        s_t2i: w.quality.s_t2i,
                        s_i2i: w.quality.s_i2i,
                        anchor: w.anchor_index,
                    });
                }
                Err(e) => failures.push((item.name.clone(), e.to_string())),
            }
        }
        let mean = |f: fn(&ItemResult) -> f64| {
            (!done.is_empty()).then(|| done.iter().map(f).sum::<f64>() / done.len() as f64)
        };
        rows.push(EvalRow {
            method: variant.label.clone(),
            mean_s_t2i: mean(|r| r.s_t2i),
            mean_s_i2i: mean(|r| r.s_i2i),
            n_images: done.len(),
            items: done,
            failures,
        });
    }
    Ok(EvalReport { rows })
}

#[cfg(feature = "parallel")]
fn map_items<T: Send>(
    items: &[EvalItem],
    jobs: usize,
    f: impl Fn((usize, &EvalItem)) -> T + Sync + Send,
) -> Vec<T> {
    use rayon::prelude::*;
    if jobs <= 1 {
        return items.iter().enumerate().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| items.par_iter().enumerate().map(&f).collect()),
        Err(_) => items.iter().enumerate().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn map_items<T>(items: &[EvalItem], _jobs: usize, f: impl Fn((usize, &EvalItem)) -> T) -> Vec<T> {
    items.iter().enumerate().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{FailurePlan, MockWorld};
    use crate::trainer::NetworkWidths;
    use std::sync::Arc;

    fn small() -> TrainConfig {
        TrainConfig {
            anchors: AnchorConfig { count: 2 },
            proposals: ProposalConfig { count: 3, scale_step: 1 },
            pool_size: 3,
            epochs: 1,
            network: NetworkWidths { conv1: 8, conv2: 4, hidden: 8 },
            ..TrainConfig::default()
        }
    }

    fn item(name: &str, tint: f32) -> EvalItem {
        EvalItem {
            name: name.into(),
            image: ImageBuffer::from_fn(64, 64, |y, x| [tint, (y + x) as f32 / 128.0, 0.1]).unwrap(),
            prompt: PromptSpec::new("blue").unwrap(),
        }
    }

    #[test]
    fn single_item_means_equal_winner() {
        let world = Arc::new(MockWorld::new(2));
        let (f, s, e) = (world.features(), world.scorer(), world.editor());
        let backends = Backends { features: &f, scorer: &s, editor: &e };
        let variant = EvalVariant::new(Method::Ours, small());
        let items = [item("a", 0.3)];
        let report = run_eval(&items, &[variant.clone()], &backends, 1).unwrap();
        let seed = derive_seed(variant.config.seed, &[tag::SAMPLE, 0]);
        let inf = run_item(&items[0], &variant, &backends, seed).unwrap();
        let row = &report.rows[0];
        assert_eq!(row.n_images, 1);
        assert_eq!(row.mean_s_t2i, Some(inf.winner().quality.s_t2i));
        assert_eq!(row.mean_s_i2i, Some(inf.winner().quality.s_i2i));
    }

    #[test]
    fn report_is_stable_and_job_independent() {
        let world = Arc::new(MockWorld::new(2));
        let (f, s, e) = (world.features(), world.scorer(), world.editor());
        let backends = Backends { features: &f, scorer: &s, editor: &e };
        let mut variants = vec![
            EvalVariant::new(Method::RandomRandom, small()),
            EvalVariant::new(Method::DinoRandom, small()),
        ];
        variants.extend(proposal_sweep(&small(), &[1, 3]));
        let items = [item("a", 0.3), item("b", 0.6), item("c", 0.1)];
        let a = run_eval(&items, &variants, &backends, 1).unwrap();
        let b = run_eval(&items, &variants, &backends, 3).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.rows.len(), 4);
        assert!(a.to_csv().starts_with("method,s_t2i,s_i2i,n_images,failures\n\"random-random\""));
    }

    #[test]
    fn failures_are_per_row() {
        let world = Arc::new(MockWorld::new(2));
        let (f, s) = (world.features(), world.scorer());
        let e = world.editor().with_failures(FailurePlan::Always { retryable: false });
        let backends = Backends { features: &f, scorer: &s, editor: &e };
        let report =
            run_eval(&[item("a", 0.3)], &[EvalVariant::new(Method::DinoRandom, small())], &backends, 1)
                .unwrap();
        assert_eq!(report.rows[0].n_images, 0);
        assert_eq!(report.rows[0].failures.len(), 1);
        assert_eq!(report.rows[0].mean_s_t2i, None);
    }

    #[test]
    fn sweeps_label_rows() {
        let labels: Vec<String> = proposal_sweep(&small(), &[1, 3, 7]).into_iter().map(|v| v.label).collect();
        assert_eq!(labels, ["ours M=1", "ours M=3", "ours M=7"]);
        assert_eq!(anchor_sweep(&small(), &[4])[0].config.anchors.count, 4);
        assert_eq!(loss_sweep(&small()).len(), 4);
        assert_eq!("dino-random".parse::<Method>().unwrap(), Method::DinoRandom);
    }
}
