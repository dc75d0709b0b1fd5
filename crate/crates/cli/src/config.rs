//! Flat key-value configuration. Precedence: command-line flags, then the
//! config file, then built-in defaults.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use regionedit::trainer::GradientMode;
use regionedit::{AnchorConfig, LossWeights, ProposalConfig, TrainConfig};

use crate::error::{CliError, CliResult};

pub const CACHE_ENV: &str = "REGIONEDIT_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Mock,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradientModeArg {
    FullEval,
    SampledEma,
}

impl From<GradientModeArg> for GradientMode {
    fn from(m: GradientModeArg) -> Self {
        match m {
            GradientModeArg::FullEval => GradientMode::FullEval,
            GradientModeArg::SampledEma => GradientMode::SampledEma,
        }
    }
}

/// Flags accepted by every pipeline command.
#[derive(Debug, Clone, Default, Args)]
pub struct SharedFlags {
    /// Flat TOML config file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of anchors (K).
    #[arg(long, value_name = "K")]
    pub anchors: Option<usize>,
    /// Proposals per anchor (M).
    #[arg(long, value_name = "M")]
    pub proposals: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of text-to-image similarity in the quality score.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of image-to-image similarity in the quality score.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Text describing the region to change, for the directional loss.
    #[arg(long, value_name = "TEXT")]
    pub roi_text: Option<String>,
    #[arg(long, value_enum)]
    pub gradient_mode: Option<GradientModeArg>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Concurrent samples in `eval`.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Bypass the feature and edit cache.
    #[arg(long)]
    pub no_cache: bool,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Keys accepted in the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub anchors: Option<usize>,
    pub proposals: Option<usize>,
    pub scale_step: Option<usize>,
    pub pool_size: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub lambda_clip: Option<f64>,
    pub lambda_structural: Option<f64>,
    pub lambda_directional: Option<f64>,
    pub roi_text: Option<String>,
    pub gradient_mode: Option<GradientMode>,
    pub ema_decay: Option<f64>,
    pub steps_per_epoch: Option<usize>,
    pub max_retries: Option<usize>,
    pub backend: Option<BackendKind>,
    pub mock_seed: Option<u64>,
    pub jobs: Option<usize>,
    pub no_cache: Option<bool>,
    pub out: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub train: TrainConfig,
    pub roi_text: Option<String>,
    pub backend: BackendKind,
    pub mock_seed: u64,
    pub jobs: usize,
    pub use_cache: bool,
    pub out: PathBuf,
    pub cache_dir: PathBuf,
}

impl Settings {
    pub fn resolve(flags: &SharedFlags, default_out: &str) -> CliResult<Self> {
        let file = match &flags.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let d = TrainConfig::default();
        let weights = LossWeights {
            clip: file.lambda_clip.unwrap_or(d.loss_weights.clip),
            structural: file.lambda_structural.unwrap_or(d.loss_weights.structural),
            directional: file.lambda_directional.unwrap_or(d.loss_weights.directional),
        };
        let train = TrainConfig {
            anchors: AnchorConfig {
                count: flags.anchors.or(file.anchors).unwrap_or(d.anchors.count),
            },
            proposals: ProposalConfig {
                count: flags.proposals.or(file.proposals).unwrap_or(d.proposals.count),
                scale_step: file.scale_step.unwrap_or(d.proposals.scale_step),
            },
            pool_size: file.pool_size.unwrap_or(d.pool_size),
            epochs: flags.epochs.or(file.epochs).unwrap_or(d.epochs),
            learning_rate: flags.lr.or(file.lr).unwrap_or(d.learning_rate),
            batch_size: file.batch_size.unwrap_or(d.batch_size),
            loss_weights: weights,
            alpha: flags.alpha.or(file.alpha).unwrap_or(d.alpha),
            beta: flags.beta.or(file.beta).unwrap_or(d.beta),
            gradient_mode: flags
                .gradient_mode
                .map(GradientMode::from)
                .or(file.gradient_mode)
                .unwrap_or(d.gradient_mode),
            ema_decay: file.ema_decay.unwrap_or(d.ema_decay),
            steps_per_epoch: file.steps_per_epoch.or(d.steps_per_epoch),
            max_retries: file.max_retries.unwrap_or(d.max_retries),
            network: d.network,
            seed: flags.seed.or(file.seed).unwrap_or(d.seed),
        };
        train.validate().map_err(|e| CliError::usage(e.to_string()))?;
        if train.anchors.count == 0 || train.proposals.count == 0 || train.proposals.scale_step == 0 {
            return Err(CliError::usage("anchors, proposals and scale_step must be at least 1"));
        }
        let jobs = flags.jobs.or(file.jobs).unwrap_or(1);
        if jobs == 0 {
            return Err(CliError::usage("--jobs must be at least 1"));
        }
        Ok(Self {
            train,
            roi_text: flags.roi_text.clone().or(file.roi_text),
            backend: flags.backend.or(file.backend).unwrap_or(BackendKind::Mock),
            mock_seed: file.mock_seed.unwrap_or(0),
            jobs,
            use_cache: !(flags.no_cache || file.no_cache.unwrap_or(false)),
            out: flags.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from(default_out)),
            cache_dir: default_cache_dir(),
        })
    }
}

pub fn default_cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(dir);
    }
    let base = std::env::var_os("XDG_CACHE_HOME")
        .map(PathBuf::from)
        .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache")))
        .unwrap_or_else(std::env::temp_dir);
    base.join("regionedit")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_library() {
        let s = Settings::resolve(&SharedFlags::default(), "out").unwrap();
        assert_eq!(s.train, TrainConfig::default());
        assert_eq!(s.backend, BackendKind::Mock);
        assert!(s.use_cache);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "epochs = 2\nlr = 0.01\nlambda_structural = 0.5\nroi_text = \"tree\"\n").unwrap();
        let flags = SharedFlags {
            config: Some(path),
            epochs: Some(3),
            ..SharedFlags::default()
        };
        let s = Settings::resolve(&flags, "out").unwrap();
        assert_eq!(s.train.epochs, 3);
        assert_eq!(s.train.learning_rate, 0.01);
        assert_eq!(s.train.loss_weights.structural, 0.5);
        assert_eq!(s.roi_text.as_deref(), Some("tree"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "nonsense = 1\n").unwrap();
        let flags = SharedFlags { config: Some(path), ..SharedFlags::default() };
        assert_eq!(Settings::resolve(&flags, "out").unwrap_err().code, 64);
        let flags = SharedFlags { lr: Some(-1.0), ..SharedFlags::default() };
        assert_eq!(Settings::resolve(&flags, "out").unwrap_err().code, 64);
    }
}
