//! Run configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use timewarp_core::corpus::{CaptionField, CorpusFormat};
use timewarp_core::datasets::{ImplicitMode, SimilarityMetric, Take, DEFAULT_HARD_THRESHOLD};
use timewarp_core::media::{PerturbationSpec, DEFAULT_DOWNSCALE, DEFAULT_FRAMES, DEFAULT_FRAME_SIZE};
use timewarp_core::permute::REFERENCE_SHUFFLE_FRACTION;
use timewarp_core::preprocess::{DEFAULT_MAX_CLIP_S, DEFAULT_MIN_SCENES};
use timewarp_core::promptkit::TemplateSet;

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dry_run: bool,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub trim: TrimConfig,
    #[serde(default)]
    pub permute: PermuteConfig,
    #[serde(default)]
    pub media: MediaConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub implicit: ImplicitConfig,
    #[serde(default)]
    pub kto: KtoConfig,
    #[serde(default)]
    pub mixture: MixtureConfig,
    #[serde(default)]
    pub probes: ProbeConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub difficulty: DifficultyConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: String,
    #[serde(default = "default_caption_field")]
    pub caption_field: String,
}

fn default_format() -> String {
    CorpusFormat::CanonicalJsonl.to_string()
}

fn default_caption_field() -> String {
    "activities".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrimConfig {
    pub max_s: f64,
    pub min_scenes: usize,
}

impl Default for TrimConfig {
    fn default() -> Self {
        Self {
            max_s: DEFAULT_MAX_CLIP_S,
            min_scenes: DEFAULT_MIN_SCENES,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PermuteConfig {
    pub shuffle_fraction: f64,
}

impl Default for PermuteConfig {
    fn default() -> Self {
        Self {
            shuffle_fraction: REFERENCE_SHUFFLE_FRACTION,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MediaConfig {
    pub n_frames: usize,
    pub frame_size: [u32; 2],
    pub toolkit: PathBuf,
    pub perturbation: PerturbationSpec,
}

impl Default for MediaConfig {
    fn default() -> Self {
        Self {
            n_frames: DEFAULT_FRAMES,
            frame_size: [DEFAULT_FRAME_SIZE.0, DEFAULT_FRAME_SIZE.1],
            toolkit: PathBuf::from("ffmpeg"),
            perturbation: PerturbationSpec::Downscale {
                downscale_factor: DEFAULT_DOWNSCALE,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model_id: String,
    pub credential_env: String,
    pub concurrency: usize,
    pub cache_dir: Option<PathBuf>,
    /// Directory of `<template_id>.txt` files replacing built-in prompts.
    pub templates_dir: Option<PathBuf>,
    pub timeout_s: u64,
    pub max_attempts: u32,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            model_id: "mock".into(),
            credential_env: "OPENAI_API_KEY".into(),
            concurrency: 4,
            cache_dir: None,
            templates_dir: None,
            timeout_s: 120,
            max_attempts: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImplicitConfig {
    pub mode: ImplicitMode,
}

impl Default for ImplicitConfig {
    fn default() -> Self {
        Self {
            mode: ImplicitMode::Prompt,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KtoConfig {
    /// Size of the seeded KTO subsample; none keeps only the full set.
    pub sample: Option<usize>,
}

/// `source` is `explicit`, `implicit`, or a path to a DPO JSONL file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartConfig {
    pub name: String,
    pub source: String,
    #[serde(default = "take_all")]
    pub take: Take,
}

fn take_all() -> Take {
    Take::All
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureConfig {
    pub parts: Vec<PartConfig>,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            parts: ["explicit", "implicit"]
                .iter()
                .map(|s| PartConfig {
                    name: s.to_string(),
                    source: s.to_string(),
                    take: Take::All,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub n_videos: usize,
    pub min_captions: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_videos: timewarp_core::benchgen::DEFAULT_PROBE_VIDEOS,
            min_captions: timewarp_core::benchgen::DEFAULT_MIN_PROBE_CAPTIONS,
        }
    }
}

/// Prediction files; a missing entry scores the seeded random baseline.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mcqa_predictions: Option<PathBuf>,
    pub probe_predictions: Option<PathBuf>,
    pub quad_predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// JSONL of log-probability records; none synthesizes a seeded batch.
    pub batch: Option<PathBuf>,
    pub synthetic_size: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            batch: None,
            synthetic_size: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DifficultyConfig {
    pub metric: SimilarityMetric,
    pub threshold: f64,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        Self {
            metric: SimilarityMetric::Dice,
            threshold: DEFAULT_HARD_THRESHOLD,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dry_run: bool,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).or_else(|e| err(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).or_else(|e| err(format!("invalid config {}: {e}", path.display())))?;
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = std::path::absolute(base).or_else(|e| err(format!("cannot resolve {}: {e}", base.display())))?;
        cfg.resolve(&base);
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if overrides.dry_run {
            cfg.dry_run = true;
        }
        if let Some(out) = &overrides.output_dir {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes relative paths relative to the config file's directory.
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.corpus.path);
        for p in [
            &mut self.eval.mcqa_predictions,
            &mut self.eval.probe_predictions,
            &mut self.eval.quad_predictions,
            &mut self.verify.batch,
            &mut self.backend.cache_dir,
            &mut self.backend.templates_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for part in &mut self.mixture.parts {
            if !matches!(part.source.as_str(), "explicit" | "implicit") && Path::new(&part.source).is_relative() {
                part.source = base.join(&part.source).display().to_string();
            }
        }
    }

    pub fn corpus_format(&self) -> CorpusFormat {
        CorpusFormat::from_str(&self.corpus.format).expect("validated")
    }

    pub fn caption_field(&self) -> CaptionField {
        self.corpus.caption_field.parse().expect("infallible")
    }

    pub fn templates(&self) -> TemplateSet {
        match &self.backend.templates_dir {
            Some(dir) => TemplateSet::with_overrides(dir).expect("validated"),
            None => TemplateSet::builtin(),
        }
    }

    pub fn frame_size(&self) -> (u32, u32) {
        (self.media.frame_size[0], self.media.frame_size[1])
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if CorpusFormat::from_str(&self.corpus.format).is_err() {
            return err(format!(
                "corpus.format `{}` is not one of finevideo-json, canonical-jsonl",
                self.corpus.format
            ));
        }
        if !self.corpus.path.exists() {
            return err(format!("corpus.path {} does not exist", self.corpus.path.display()));
        }
        if self.trim.max_s.is_nan() || self.trim.max_s <= 0.0 {
            return err("trim.max_s must be positive");
        }
        if self.trim.min_scenes == 0 {
            return err("trim.min_scenes must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.permute.shuffle_fraction) {
            return err("permute.shuffle_fraction must be within [0, 1]");
        }
        if self.media.n_frames == 0 || self.media.frame_size.contains(&0) {
            return err("media.n_frames and media.frame_size must be positive");
        }
        self.media
            .perturbation
            .validate()
            .or_else(|e| err(format!("media.perturbation: {e}")))?;
        if self.backend.concurrency == 0 || self.backend.max_attempts == 0 {
            return err("backend.concurrency and backend.max_attempts must be at least 1");
        }
        if self.backend.kind == BackendKind::Http && self.backend.endpoint.is_none() {
            return err("backend.endpoint is required for the http backend");
        }
        if let Some(dir) = &self.backend.templates_dir {
            TemplateSet::with_overrides(dir).or_else(|e| err(format!("backend.templates_dir: {e}")))?;
        }
        if !(0.0..=1.0).contains(&self.difficulty.threshold) {
            return err("difficulty.threshold must be within [0, 1]");
        }
        let mut names = std::collections::BTreeSet::new();
        for part in &self.mixture.parts {
            if !names.insert(part.name.as_str()) {
                return err(format!("mixture part name `{}` is repeated", part.name));
            }
            if !matches!(part.source.as_str(), "explicit" | "implicit") && !Path::new(&part.source).exists() {
                return err(format!("mixture part `{}`: {} does not exist", part.name, part.source));
            }
        }
        for (key, path) in [
            ("eval.mcqa_predictions", &self.eval.mcqa_predictions),
            ("eval.probe_predictions", &self.eval.probe_predictions),
            ("eval.quad_predictions", &self.eval.quad_predictions),
            ("verify.batch", &self.verify.batch),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return err(format!("{key}: {} does not exist", p.display()));
                }
            }
        }
        if self.verify.batch.is_none() && self.verify.synthetic_size == 0 {
            return err("verify.synthetic_size must be at least 1");
        }
        Ok(())
    }
}
