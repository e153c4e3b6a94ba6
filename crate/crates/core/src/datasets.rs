//! Preference, KTO and SFT record assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::VideoRecord;
use crate::digest::{content_id, split_seed};
use crate::llmclient::{Client, GenRequest, LlmError, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE};
use crate::media::PerturbationSpec;
use crate::permute::{PermKind, ScenePermutation};
use crate::preprocess::CompositeCaption;
use crate::promptkit::{parse_oe_qa, placeholders, OpenEndedQA, PromptError, TemplateId, TemplateSet};

/// Appended to every preference prompt after the question.
pub const ANSWER_INSTRUCTION: &str = "Answer the question based on the order in which events happen in the video.";
pub const DEFAULT_HARD_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Explicit,
    ImplicitPrompt,
    ImplicitFrame,
    External,
}

impl fmt::Display for PairSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Explicit => "explicit",
            Self::ImplicitPrompt => "implicit_prompt",
            Self::ImplicitFrame => "implicit_frame",
            Self::External => "external",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairPermKind {
    None,
    Shuffled,
    Reversed,
}

impl From<PermKind> for PairPermKind {
    fn from(k: PermKind) -> Self {
        match k {
            PermKind::Shuffled => Self::Shuffled,
            PermKind::Reversed => Self::Reversed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub id: String,
    pub video_path: String,
    pub shuffled_video_path: Option<String>,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub source: PairSource,
    pub perm_kind: PairPermKind,
    /// Tag of the frame perturbation that produced `rejected`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<String>,
    /// Mixture part this record was drawn from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl PreferenceRecord {
    pub fn check(&self) -> Result<(), String> {
        if self.chosen == self.rejected {
            return Err(format!("{}: chosen equals rejected", self.id));
        }
        if self.source == PairSource::Explicit
            && (self.shuffled_video_path.is_none() || self.perm_kind == PairPermKind::None)
        {
            return Err(format!("{}: explicit record without a shuffled video", self.id));
        }
        if self.source == PairSource::ImplicitFrame && self.perturbation.is_none() {
            return Err(format!("{}: frame-perturbed record without a perturbation", self.id));
        }
        Ok(())
    }
}

pub fn pair_id(video_id: &str, question: &str, source: PairSource) -> String {
    content_id(&[video_id, question, &source.to_string()])
}

pub fn preference_prompt(question: &str) -> String {
    format!("{question}\n{ANSWER_INSTRUCTION}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Original,
    Shuffled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KtoRecord {
    pub id: String,
    pub dpo_id: String,
    pub video_path: String,
    pub prompt: String,
    pub completion: String,
    pub label: bool,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub id: String,
    pub video_path: String,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("generation failed for {video_id}: {source}")]
    Generation {
        video_id: String,
        #[source]
        source: LlmError,
    },
    #[error("frame-perturbation mode requires a perturbation spec")]
    MissingPerturbation,
    #[error("{video_id}: no frames given")]
    NoFrames { video_id: String },
    #[error("{video_id}: degenerate pair ({reason})")]
    Degenerate { video_id: String, reason: String },
    #[error("mixture part `{part}` has {available} records; {take} requested")]
    MixtureUnderflow {
        part: String,
        take: usize,
        available: usize,
    },
    #[error("cannot sample {requested} records from {available}")]
    SampleUnderflow { requested: usize, available: usize },
    #[error("duplicate record id {0} in mixture")]
    DuplicateId(String),
}

/// Records produced for one video plus one diagnostic per skipped item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assembled<T> {
    pub records: Vec<T>,
    pub diagnostics: Vec<String>,
}

impl<T> Default for Assembled<T> {
    fn default() -> Self {
        Self {
            records: Vec::new(),
            diagnostics: Vec::new(),
        }
    }
}

/// Generator settings shared by the assembly operations.
pub struct Generator<'a> {
    pub client: &'a Client,
    pub templates: &'a TemplateSet,
    pub model_id: &'a str,
}

impl Generator<'_> {
    pub(crate) fn ask(&self, video_id: &str, prompt: String, attachments: Vec<String>) -> Result<String, DatasetError> {
        let req = GenRequest::new(
            prompt,
            attachments,
            self.model_id,
            DEFAULT_TEMPERATURE,
            DEFAULT_MAX_TOKENS,
        );
        self.client
            .generate(&req)
            .map(|r| r.text)
            .map_err(|source| DatasetError::Generation {
                video_id: video_id.to_string(),
                source,
            })
    }
}

/// Paths of the rendered original and permuted clips of one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipPaths {
    pub original: String,
    pub permuted: String,
}

/// One preference record per QA: chosen is the answer grounded in the
/// original narrative, rejected is the generator's answer to the same
/// question over the permuted narrative.
pub fn build_explicit_pairs(
    perm: &ScenePermutation,
    original: &CompositeCaption,
    permuted: &CompositeCaption,
    qa: &[OpenEndedQA],
    paths: &ClipPaths,
    gen: &Generator<'_>,
) -> Result<Assembled<PreferenceRecord>, DatasetError> {
    let video_id = &original.video_id;
    let mut out = Assembled::default();
    let mut seen = BTreeSet::new();
    let template = gen.templates.get(TemplateId::DispreferredGen);
    for item in qa {
        if !seen.insert(item.question.clone()) {
            out.diagnostics
                .push(format!("{video_id}: duplicate question skipped: {}", item.question));
            continue;
        }
        let prompt = template.render(&placeholders([
            ("composite_caption", &permuted.rendered),
            ("question", &item.question),
        ]))?;
        let raw = gen.ask(video_id, prompt, Vec::new())?;
        let rejected = match parse_oe_qa(&raw) {
            Ok(p) if !p.items.is_empty() => p.items[0].answer.clone(),
            Ok(p) => {
                out.diagnostics.push(format!(
                    "{video_id}: no usable dispreferred answer for `{}` ({})",
                    item.question,
                    p.dropped.join("; ")
                ));
                continue;
            }
            Err(e) => {
                out.diagnostics.push(format!("{video_id}: `{}`: {e}", item.question));
                continue;
            }
        };
        let record = PreferenceRecord {
            id: pair_id(video_id, &item.question, PairSource::Explicit),
            video_path: paths.original.clone(),
            shuffled_video_path: Some(paths.permuted.clone()),
            prompt: preference_prompt(&item.question),
            chosen: item.answer.clone(),
            rejected,
            source: PairSource::Explicit,
            perm_kind: perm.kind.into(),
            perturbation: None,
            provenance: None,
        };
        match record.check() {
            Ok(()) => out.records.push(record),
            Err(reason) => out.diagnostics.push(reason),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImplicitMode {
    Prompt,
    Frame,
}

impl FromStr for ImplicitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prompt" => Ok(Self::Prompt),
            "frame" => Ok(Self::Frame),
            other => Err(format!("unknown implicit mode `{other}` (expected prompt or frame)")),
        }
    }
}

/// Frames for the implicit construction. `perturbed` is required in frame
/// mode and must match `clean` one to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitInputs<'a> {
    pub video_path: &'a str,
    pub clean: &'a [String],
    pub perturbed: Option<(&'a PerturbationSpec, &'a [String])>,
}

/// Chosen is the subject model's clean description; rejected comes from a
/// hallucination prompt (prompt mode) or from perturbed frames (frame mode).
/// `index` selects the hallucination prompt.
pub fn build_implicit_pairs(
    record: &VideoRecord,
    inputs: &ImplicitInputs<'_>,
    mode: ImplicitMode,
    index: usize,
    gen: &Generator<'_>,
) -> Result<PreferenceRecord, DatasetError> {
    let video_id = &record.video_id;
    if inputs.clean.is_empty() {
        return Err(DatasetError::NoFrames {
            video_id: video_id.clone(),
        });
    }
    let clean_prompt = gen.templates.render(TemplateId::MutDescribe, &BTreeMap::new())?;
    let (source, rejected_prompt, rejected_frames, perturbation) = match mode {
        ImplicitMode::Prompt => {
            let id = TemplateId::hallucination_for(index);
            let p = gen.templates.render(id, &BTreeMap::new())?;
            (PairSource::ImplicitPrompt, p, inputs.clean.to_vec(), None)
        }
        ImplicitMode::Frame => {
            let (spec, frames) = inputs.perturbed.ok_or(DatasetError::MissingPerturbation)?;
            if frames.is_empty() {
                return Err(DatasetError::NoFrames {
                    video_id: video_id.clone(),
                });
            }
            (
                PairSource::ImplicitFrame,
                clean_prompt.clone(),
                frames.to_vec(),
                Some(spec.tag()),
            )
        }
    };
    let chosen = gen.ask(video_id, clean_prompt.clone(), inputs.clean.to_vec())?;
    let rejected = gen.ask(video_id, rejected_prompt, rejected_frames)?;
    let record = PreferenceRecord {
        id: pair_id(video_id, &clean_prompt, source),
        video_path: inputs.video_path.to_string(),
        shuffled_video_path: None,
        prompt: clean_prompt,
        chosen: chosen.trim().to_string(),
        rejected: rejected.trim().to_string(),
        source,
        perm_kind: PairPermKind::None,
        perturbation,
        provenance: None,
    };
    record.check().map_err(|reason| DatasetError::Degenerate {
        video_id: video_id.clone(),
        reason,
    })?;
    Ok(record)
}

/// Each convertible pair yields four records crossing {original, shuffled}
/// video with {chosen, rejected} completion; on the shuffled video the
/// preference is reversed.
pub fn dpo_to_kto(pairs: &[PreferenceRecord]) -> Assembled<KtoRecord> {
    let mut out = Assembled::default();
    for pair in pairs {
        let Some(shuffled) = &pair.shuffled_video_path else {
            out.diagnostics
                .push(format!("{}: no shuffled video; not KTO-convertible", pair.id));
            continue;
        };
        let cells = [
            (Origin::Original, &pair.video_path, &pair.chosen, true),
            (Origin::Original, &pair.video_path, &pair.rejected, false),
            (Origin::Shuffled, shuffled, &pair.rejected, true),
            (Origin::Shuffled, shuffled, &pair.chosen, false),
        ];
        for (origin, video, completion, label) in cells {
            let origin_name = match origin {
                Origin::Original => "original",
                Origin::Shuffled => "shuffled",
            };
            out.records.push(KtoRecord {
                id: content_id(&[&pair.id, origin_name, if label { "true" } else { "false" }]),
                dpo_id: pair.id.clone(),
                video_path: video.clone(),
                prompt: pair.prompt.clone(),
                completion: completion.clone(),
                label,
                origin,
            });
        }
    }
    out
}

/// Seeded sample without replacement of `indices` out of `len`, returned in
/// ascending order.
fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, len, n).into_vec();
    picked.sort_unstable();
    picked
}

/// Exactly `n` records drawn without replacement, in input order.
pub fn sample_kto(records: &[KtoRecord], n: usize, seed: u64) -> Result<Vec<KtoRecord>, DatasetError> {
    if n > records.len() {
        return Err(DatasetError::SampleUnderflow {
            requested: n,
            available: records.len(),
        });
    }
    Ok(sample_indices(records.len(), n, seed)
        .into_iter()
        .map(|i| records[i].clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Take {
    All,
    Count(usize),
}

impl FromStr for Take {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "all" => Ok(Self::All),
            n => n
                .replace('_', "")
                .parse()
                .map(Self::Count)
                .map_err(|_| format!("take must be `all` or a count, got `{s}`")),
        }
    }
}

impl fmt::Display for Take {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::All => f.write_str("all"),
            Self::Count(n) => write!(f, "{n}"),
        }
    }
}

impl Serialize for Take {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::All => s.serialize_str("all"),
            Self::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Take {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Count(u64),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Count(n) => Ok(Self::Count(n as usize)),
            Repr::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixturePart {
    pub name: String,
    pub records: Vec<PreferenceRecord>,
    pub take: Take,
}

/// Draws `take` records from each part (seeded per part name, so part order
/// does not matter), tags provenance, and returns the union sorted by id.
pub fn merge_mixture(parts: &[MixturePart], seed: u64) -> Result<Vec<PreferenceRecord>, DatasetError> {
    let mut merged = Vec::new();
    for part in parts {
        let mut pool = part.records.clone();
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        let n = match part.take {
            Take::All => pool.len(),
            Take::Count(n) if n > pool.len() => {
                return Err(DatasetError::MixtureUnderflow {
                    part: part.name.clone(),
                    take: n,
                    available: pool.len(),
                })
            }
            Take::Count(n) => n,
        };
        for i in sample_indices(pool.len(), n, split_seed(seed, &part.name)) {
            let mut r = pool[i].clone();
            r.provenance = Some(part.name.clone());
            merged.push(r);
        }
    }
    merged.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = merged.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(DatasetError::DuplicateId(w[0].id.clone()));
    }
    Ok(merged)
}

pub fn export_sft(pairs: &[PreferenceRecord]) -> Vec<SftRecord> {
    pairs
        .iter()
        .map(|p| SftRecord {
            id: content_id(&[&p.id, "sft"]),
            video_path: p.video_path.clone(),
            prompt: p.prompt.clone(),
            response: p.chosen.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMetric {
    /// 2|A∩B| / (|A|+|B|)
    #[default]
    Dice,
    /// |A∩B| / |A∪B|
    Jaccard,
    /// |A∩B| / min(|A|,|B|)
    Overlap,
}

impl FromStr for SimilarityMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dice" => Ok(Self::Dice),
            "jaccard" => Ok(Self::Jaccard),
            "overlap" => Ok(Self::Overlap),
            other => Err(format!("unknown similarity metric `{other}`")),
        }
    }
}

/// Lowercased alphanumeric word set.
pub fn token_set(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn similarity(a: &str, b: &str, metric: SimilarityMetric) -> f64 {
    let (a, b) = (token_set(a), token_set(b));
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let common = a.intersection(&b).count() as f64;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    match metric {
        SimilarityMetric::Dice => 2.0 * common / (na + nb),
        SimilarityMetric::Jaccard => common / a.union(&b).count() as f64,
        SimilarityMetric::Overlap => {
            let m = na.min(nb);
            if m == 0.0 {
                0.0
            } else {
                common / m
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDifficulty {
    pub id: String,
    pub similarity: f64,
    pub hard: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyReport {
    pub metric: SimilarityMetric,
    pub threshold: f64,
    pub pairs: Vec<PairDifficulty>,
    /// Counts over ten equal-width bins of [0, 1].
    pub histogram: [usize; 10],
    pub hard: usize,
}

pub fn difficulty_probe(pairs: &[PreferenceRecord], metric: SimilarityMetric, threshold: f64) -> DifficultyReport {
    let mut histogram = [0usize; 10];
    let pairs: Vec<PairDifficulty> = pairs
        .iter()
        .map(|p| {
            let s = similarity(&p.chosen, &p.rejected, metric);
            histogram[((s * 10.0) as usize).min(9)] += 1;
            PairDifficulty {
                id: p.id.clone(),
                similarity: s,
                hard: s > threshold,
            }
        })
        .collect();
    DifficultyReport {
        metric,
        threshold,
        hard: pairs.iter().filter(|p| p.hard).count(),
        pairs,
        histogram,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Scene;
    use crate::jsonl::{parse_jsonl, to_jsonl_string};
    use crate::permute::make_reverse;
    use crate::preprocess::build_composite_caption;
    use crate::preprocess::ClipSpec;
    use crate::promptkit::TargetRelation;
    use proptest::prelude::*;

    fn video(caps: &[&str]) -> VideoRecord {
        VideoRecord {
            video_id: "v1".into(),
            media_path: String::new(),
            duration_s: 10.0 * caps.len() as f64,
            scenes: caps
                .iter()
                .enumerate()
                .map(|(i, c)| Scene {
                    index: i,
                    start_s: 10.0 * i as f64,
                    end_s: 10.0 * (i + 1) as f64,
                    caption: c.to_string(),
                })
                .collect(),
        }
    }

    fn clip(n: usize) -> ClipSpec {
        ClipSpec {
            video_id: "v1".into(),
            kept_scene_indices: (0..n).collect(),
            trim_end_s: 10.0 * n as f64,
            clip_duration_s: 10.0 * n as f64,
            over_budget: false,
        }
    }

    fn qa(q: &str, a: &str) -> OpenEndedQA {
        OpenEndedQA {
            question: q.into(),
            answer: a.into(),
            target_relation: TargetRelation::After,
        }
    }

    fn paths() -> ClipPaths {
        ClipPaths {
            original: "clips/v1/v1_original.mp4".into(),
            permuted: "clips/v1/v1_reversed.mp4".into(),
        }
    }

    fn explicit(qas: &[OpenEndedQA]) -> Assembled<PreferenceRecord> {
        let rec = video(&["A", "B", "C"]);
        let perm = make_reverse(&clip(3)).unwrap();
        let orig = build_composite_caption(&rec, &[0, 1, 2]).unwrap();
        let permuted = build_composite_caption(&rec, &perm.scene_order(&clip(3))).unwrap();
        let client = Client::mock();
        let templates = TemplateSet::builtin();
        let gen = Generator {
            client: &client,
            templates: &templates,
            model_id: "mock",
        };
        build_explicit_pairs(&perm, &orig, &permuted, qas, &paths(), &gen).unwrap()
    }

    #[test]
    fn reversed_narrative_gives_wrapped_successor() {
        let out = explicit(&[qa("What happens immediately after: A?", "B")]);
        let r = &out.records[0];
        assert_eq!(r.chosen, "B");
        assert_eq!(r.rejected, "C");
        assert_eq!(r.perm_kind, PairPermKind::Reversed);
        assert_eq!(r.shuffled_video_path.as_deref(), Some("clips/v1/v1_reversed.mp4"));
        assert!(r.prompt.starts_with("What happens immediately after: A?\n"));
    }

    #[test]
    fn equal_chosen_and_rejected_is_dropped() {
        // Under the reversal B's successor is A, so chosen "A" collides.
        let out = explicit(&[qa("What happens immediately after: B?", "A")]);
        assert!(out.records.is_empty());
        assert_eq!(out.diagnostics.len(), 1);
    }

    #[test]
    fn ids_are_deterministic_question_hashes() {
        let qas = [
            qa("What happens immediately after: A?", "B"),
            qa("What happens immediately after: B?", "C"),
        ];
        let a = explicit(&qas);
        let b = explicit(&qas);
        assert_eq!(a.records.len(), 2);
        assert_eq!(a, b);
        assert_eq!(a.records[0].id, pair_id("v1", &qas[0].question, PairSource::Explicit));
        assert_ne!(a.records[0].id, a.records[1].id);
    }

    fn implicit(mode: ImplicitMode, spec: Option<&PerturbationSpec>) -> Result<PreferenceRecord, DatasetError> {
        let rec = video(&["A", "B"]);
        let clean: Vec<String> = (0..3).map(|k| format!("w/v1/frames/frame_{k:02}.jpg")).collect();
        let perturbed: Vec<String> = (0..3)
            .map(|k| format!("w/v1/downscale_0.25/frame_{k:02}.jpg"))
            .collect();
        let client = Client::mock();
        let templates = TemplateSet::builtin();
        let gen = Generator {
            client: &client,
            templates: &templates,
            model_id: "mock",
        };
        let inputs = ImplicitInputs {
            video_path: "clips/v1/v1_original.mp4",
            clean: &clean,
            perturbed: spec.map(|s| (s, perturbed.as_slice())),
        };
        build_implicit_pairs(&rec, &inputs, mode, 0, &gen)
    }

    #[test]
    fn prompt_mode_rejected_is_hallucinated() {
        let r = implicit(ImplicitMode::Prompt, None).unwrap();
        assert!(r.rejected.starts_with("HALLUCINATED:"));
        assert!(!r.chosen.starts_with("HALLUCINATED:"));
        assert_eq!(r.source, PairSource::ImplicitPrompt);
        assert!(r.perturbation.is_none());
    }

    #[test]
    fn frame_mode_sets_perturbation_and_keeps_video() {
        let spec = PerturbationSpec::Downscale { downscale_factor: 0.25 };
        let r = implicit(ImplicitMode::Frame, Some(&spec)).unwrap();
        assert_eq!(r.perturbation.as_deref(), Some("downscale_0.25"));
        assert_eq!(r.video_path, "clips/v1/v1_original.mp4");
        assert_ne!(r.chosen, r.rejected);
        assert!(matches!(
            implicit(ImplicitMode::Frame, None),
            Err(DatasetError::MissingPerturbation)
        ));
    }

    fn pref(i: usize, source: PairSource) -> PreferenceRecord {
        let explicit = source == PairSource::Explicit;
        PreferenceRecord {
            id: content_id(&[&i.to_string(), &source.to_string()]),
            video_path: format!("v{i}.mp4"),
            shuffled_video_path: explicit.then(|| format!("v{i}_shuffled.mp4")),
            prompt: format!("q{i}"),
            chosen: format!("good {i}"),
            rejected: format!("bad {i}"),
            source,
            perm_kind: if explicit {
                PairPermKind::Shuffled
            } else {
                PairPermKind::None
            },
            perturbation: None,
            provenance: None,
        }
    }

    #[test]
    fn kto_label_matrix() {
        let p = pref(0, PairSource::Explicit);
        let out = dpo_to_kto(std::slice::from_ref(&p));
        let cells: Vec<(Origin, &str, bool)> = out
            .records
            .iter()
            .map(|k| (k.origin, k.completion.as_str(), k.label))
            .collect();
        assert_eq!(
            cells,
            [
                (Origin::Original, "good 0", true),
                (Origin::Original, "bad 0", false),
                (Origin::Shuffled, "bad 0", true),
                (Origin::Shuffled, "good 0", false),
            ]
        );
        assert_eq!(out.records[2].video_path, "v0_shuffled.mp4");
        assert!(out.records.iter().all(|k| k.dpo_id == p.id));
    }

    #[test]
    fn implicit_pairs_are_not_kto_convertible() {
        let out = dpo_to_kto(&[pref(0, PairSource::ImplicitPrompt), pref(1, PairSource::Explicit)]);
        assert_eq!(out.records.len(), 4);
        assert_eq!(out.diagnostics.len(), 1);
    }

    #[test]
    fn sample_kto_is_exact_and_seeded() {
        let pairs: Vec<_> = (0..50).map(|i| pref(i, PairSource::Explicit)).collect();
        let kto = dpo_to_kto(&pairs).records;
        let a = sample_kto(&kto, 75, 7).unwrap();
        assert_eq!(a.len(), 75);
        assert_eq!(a, sample_kto(&kto, 75, 7).unwrap());
        assert_ne!(a, sample_kto(&kto, 75, 8).unwrap());
        assert!(matches!(
            sample_kto(&kto, 201, 7),
            Err(DatasetError::SampleUnderflow { .. })
        ));
    }

    fn part(name: &str, source: PairSource, n: usize, take: Take) -> MixturePart {
        MixturePart {
            name: name.into(),
            records: (0..n).map(|i| pref(i, source)).collect(),
            take,
        }
    }

    #[test]
    fn mixture_counts_and_provenance() {
        let parts = [
            part("external", PairSource::External, 40, Take::All),
            part("explicit", PairSource::Explicit, 30, Take::Count(10)),
            part("implicit", PairSource::ImplicitPrompt, 30, Take::Count(0)),
        ];
        let merged = merge_mixture(&parts, 1).unwrap();
        assert_eq!(merged.len(), 50);
        let explicit = merged
            .iter()
            .filter(|r| r.provenance.as_deref() == Some("explicit"))
            .count();
        assert_eq!(explicit, 10);
        assert!(!merged.iter().any(|r| r.provenance.as_deref() == Some("implicit")));
        let mut reversed = parts.to_vec();
        reversed.reverse();
        assert_eq!(merge_mixture(&reversed, 1).unwrap(), merged);
    }

    #[test]
    fn mixture_underflow_names_part() {
        let err = merge_mixture(&[part("tiny", PairSource::External, 3, Take::Count(4))], 0).unwrap_err();
        assert!(matches!(err, DatasetError::MixtureUnderflow { ref part, take: 4, available: 3 } if part == "tiny"));
    }

    #[test]
    fn take_parses_from_toml_values() {
        #[derive(Deserialize)]
        struct P {
            take: Take,
        }
        let a: P = toml_like(r#"{"take": "all"}"#);
        let b: P = toml_like(r#"{"take": 7500}"#);
        assert_eq!(a.take, Take::All);
        assert_eq!(b.take, Take::Count(7500));
        assert_eq!("7_500".parse::<Take>().unwrap(), Take::Count(7500));
    }

    fn toml_like<T: serde::de::DeserializeOwned>(s: &str) -> T {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn sft_uses_chosen() {
        let pairs: Vec<_> = (0..3).map(|i| pref(i, PairSource::Explicit)).collect();
        let sft = export_sft(&pairs);
        assert_eq!(sft.len(), 3);
        for (s, p) in sft.iter().zip(&pairs) {
            assert_eq!(s.response, p.chosen);
        }
        assert_eq!(sft, export_sft(&pairs));
        assert!(export_sft(&[]).is_empty());
    }

    #[test]
    fn dpo_jsonl_schema() {
        let line = to_jsonl_string(&[pref(0, PairSource::Explicit)]);
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let want: BTreeSet<&str> = [
            "id",
            "video_path",
            "shuffled_video_path",
            "prompt",
            "chosen",
            "rejected",
            "source",
            "perm_kind",
        ]
        .into();
        assert_eq!(keys, want);
        assert_eq!(v["perm_kind"], "shuffled");
        let implicit = to_jsonl_string(&[pref(0, PairSource::ImplicitFrame)]);
        assert!(implicit.contains("\"shuffled_video_path\":null"));
        assert!(implicit.contains("\"source\":\"implicit_frame\""));
    }

    #[test]
    fn kto_and_sft_jsonl_round_trip() {
        let pairs: Vec<_> = (0..3).map(|i| pref(i, PairSource::Explicit)).collect();
        let kto = dpo_to_kto(&pairs).records;
        let text = to_jsonl_string(&kto);
        assert!(text
            .lines()
            .next()
            .unwrap()
            .contains("\"label\":true,\"origin\":\"original\""));
        assert_eq!(parse_jsonl::<KtoRecord>(&text, "t").unwrap(), kto);
        let sft = export_sft(&pairs);
        assert_eq!(parse_jsonl::<SftRecord>(&to_jsonl_string(&sft), "t").unwrap(), sft);
    }

    const POSITIVE: &str = "At the beginning of the video, the person is seen smiling and waving to the camera, which sets a friendly and engaging tone before she delves into her skincare routine.";
    const NEGATIVE: &str = "At the beginning of the video, the person is smiling and looking down before she starts discussing her skincare routine.";

    #[test]
    fn reference_pair_is_hard_under_default_metric() {
        // 26 and 18 distinct words, 14 shared.
        assert_eq!(token_set(POSITIVE).len(), 26);
        assert_eq!(token_set(NEGATIVE).len(), 18);
        let dice = similarity(POSITIVE, NEGATIVE, SimilarityMetric::Dice);
        assert!((dice - 28.0 / 44.0).abs() < 1e-12);
        let jac = similarity(POSITIVE, NEGATIVE, SimilarityMetric::Jaccard);
        assert!((jac - 14.0 / 30.0).abs() < 1e-12);
        let mut p = pref(0, PairSource::External);
        p.chosen = POSITIVE.into();
        p.rejected = NEGATIVE.into();
        let report = difficulty_probe(&[p], SimilarityMetric::default(), DEFAULT_HARD_THRESHOLD);
        assert!(report.pairs[0].hard);
        assert_eq!(report.histogram[6], 1);
    }

    #[test]
    fn one_word_change_and_disjoint_texts() {
        let a = "the woman waves at the camera and then turns to the mirror";
        let b = "the woman waves at the camera and then turns to the sink";
        // 10 distinct words each, 9 shared.
        assert!((similarity(a, b, SimilarityMetric::Dice) - 0.9).abs() < 1e-12);
        assert!(similarity(a, b, SimilarityMetric::Overlap) > 0.89);
        assert_eq!(similarity("red apple", "blue sky", SimilarityMetric::Dice), 0.0);
        assert_eq!(similarity("red apple", "blue sky", SimilarityMetric::Jaccard), 0.0);
    }

    proptest! {
        #[test]
        fn kto_is_four_per_pair(n in 0usize..40) {
            let pairs: Vec<_> = (0..n).map(|i| pref(i, PairSource::Explicit)).collect();
            let kto = dpo_to_kto(&pairs).records;
            prop_assert_eq!(kto.len(), 4 * n);
            for chunk in kto.chunks(4) {
                let labels: Vec<bool> = chunk.iter().map(|k| k.label).collect();
                prop_assert_eq!(labels, vec![true, false, true, false]);
            }
        }

        #[test]
        fn similarity_bounded_and_symmetric(a in "[a-d ]{0,30}", b in "[a-d ]{0,30}") {
            for m in [SimilarityMetric::Dice, SimilarityMetric::Jaccard, SimilarityMetric::Overlap] {
                let s = similarity(&a, &b, m);
                prop_assert!((0.0..=1.0).contains(&s));
                prop_assert_eq!(s, similarity(&b, &a, m));
            }
        }

        #[test]
        fn mixture_ignores_part_order(seed in any::<u64>(), k in 0usize..20) {
            let parts = vec![
                part("a", PairSource::External, 20, Take::Count(k)),
                part("b", PairSource::Explicit, 20, Take::All),
            ];
            let mut rev = parts.clone();
            rev.reverse();
            prop_assert_eq!(merge_mixture(&parts, seed).unwrap(), merge_mixture(&rev, seed).unwrap());
        }
    }
}
