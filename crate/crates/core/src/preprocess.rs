//! Clip trimming, composite chronological captions, and dataset statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, VideoRecord};

pub const DEFAULT_MAX_CLIP_S: f64 = 105.0;
pub const DEFAULT_MIN_SCENES: usize = 2;

const FIRST: &str = "First, ";
const THEN: &str = " Then, ";
const FINALLY: &str = " Finally, ";

/// The kept portion of one source video. Clips always start at t = 0 and
/// keep a prefix of the scene list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub video_id: String,
    pub kept_scene_indices: Vec<usize>,
    pub trim_end_s: f64,
    pub clip_duration_s: f64,
    /// Set when the minimum scene count forced the clip past the duration cap.
    #[serde(default)]
    pub over_budget: bool,
}

impl ClipSpec {
    pub fn scene_count(&self) -> usize {
        self.kept_scene_indices.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PreprocessError {
    #[error("video {video_id} has {scenes} scene(s); at least {required} required")]
    TooFewScenes {
        video_id: String,
        scenes: usize,
        required: usize,
    },
    #[error("invalid scene order for {video_id}: {reason}")]
    InvalidOrder { video_id: String, reason: String },
}

pub fn trim_video(record: &VideoRecord, max_s: f64, min_scenes: usize) -> Result<ClipSpec, PreprocessError> {
    let n = record.scenes.len();
    if n < min_scenes.max(1) {
        return Err(PreprocessError::TooFewScenes {
            video_id: record.video_id.clone(),
            scenes: n,
            required: min_scenes,
        });
    }
    let fitting = record.scenes.iter().take_while(|s| s.end_s <= max_s).count();
    let kept = fitting.max(min_scenes);
    let trim_end_s = record.scenes[kept - 1].end_s.min(record.duration_s);
    Ok(ClipSpec {
        video_id: record.video_id.clone(),
        kept_scene_indices: (0..kept).collect(),
        trim_end_s,
        clip_duration_s: trim_end_s,
        over_budget: trim_end_s > max_s,
    })
}

/// Clips for every video that can be trimmed, plus the ids of excluded ones.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrimOutcome {
    pub clips: Vec<ClipSpec>,
    pub excluded: Vec<String>,
}

pub fn trim_corpus(corpus: &Corpus, max_s: f64, min_scenes: usize) -> TrimOutcome {
    let mut out = TrimOutcome::default();
    for record in &corpus.records {
        match trim_video(record, max_s, min_scenes) {
            Ok(clip) => out.clips.push(clip),
            Err(e) => {
                log::info!("excluded: {e}");
                out.excluded.push(record.video_id.clone());
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeCaption {
    pub video_id: String,
    pub ordered_captions: Vec<(usize, String)>,
    pub rendered: String,
}

impl CompositeCaption {
    pub fn captions(&self) -> Vec<&str> {
        self.ordered_captions.iter().map(|(_, c)| c.as_str()).collect()
    }
}

/// Renders captions in `order` with First/Then/Finally markers. Two
/// captions render as "First, A Then, B".
pub fn build_composite_caption(record: &VideoRecord, order: &[usize]) -> Result<CompositeCaption, PreprocessError> {
    let invalid = |reason: String| PreprocessError::InvalidOrder {
        video_id: record.video_id.clone(),
        reason,
    };
    if order.is_empty() {
        return Err(invalid("empty order".into()));
    }
    let mut seen = vec![false; record.scenes.len()];
    for &i in order {
        if i >= record.scenes.len() {
            return Err(invalid(format!(
                "scene index {i} out of range (video has {} scenes)",
                record.scenes.len()
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(invalid(format!("scene index {i} repeated")));
        }
    }
    let ordered_captions: Vec<(usize, String)> = order.iter().map(|&i| (i, record.scenes[i].caption.clone())).collect();
    let captions: Vec<&str> = ordered_captions.iter().map(|(_, c)| c.as_str()).collect();
    Ok(CompositeCaption {
        video_id: record.video_id.clone(),
        rendered: render_captions(&captions),
        ordered_captions,
    })
}

pub fn render_captions(captions: &[&str]) -> String {
    let n = captions.len();
    let mut out = String::new();
    for (k, caption) in captions.iter().enumerate() {
        let marker = if k == 0 {
            FIRST
        } else if k + 1 == n && n >= 3 {
            FINALLY
        } else {
            THEN
        };
        out.push_str(marker);
        out.push_str(caption);
    }
    out
}

/// Inverse of [`render_captions`]. Only exact for captions that do not
/// themselves contain the marker phrases.
pub fn parse_composite_caption(rendered: &str) -> Option<Vec<String>> {
    let body = rendered.strip_prefix(FIRST)?;
    let (body, last) = match body.rsplit_once(FINALLY) {
        Some((head, last)) => (head, Some(last)),
        None => (body, None),
    };
    let mut captions: Vec<String> = body.split(THEN).map(str::to_string).collect();
    if let Some(last) = last {
        if captions.len() < 2 {
            return None;
        }
        captions.push(last.to_string());
    }
    Some(captions)
}

/// Summary statistics of a generated dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub total_videos: usize,
    pub excluded_videos: usize,
    pub over_budget_clips: usize,
    pub avg_scenes_per_clip: f64,
    pub avg_scene_duration_s: f64,
    pub avg_clip_duration_s: f64,
    pub total_qa_pairs: usize,
    pub preference_records: usize,
    pub shuffled: usize,
    pub reversed: usize,
}

/// Computes statistics over trimmed clips. `qa_counts` maps video id to
/// the number of QA pairs generated for it.
pub fn corpus_stats(corpus: &Corpus, clips: &[ClipSpec], qa_counts: &BTreeMap<String, usize>) -> StatsReport {
    if clips.is_empty() {
        return StatsReport {
            total_qa_pairs: qa_counts.values().sum(),
            ..StatsReport::default()
        };
    }
    let mut scene_total = 0usize;
    let mut scene_duration = 0.0;
    for clip in clips {
        scene_total += clip.scene_count();
        if let Some(record) = corpus.get(&clip.video_id) {
            for &i in &clip.kept_scene_indices {
                let s = &record.scenes[i];
                scene_duration += s.end_s.min(clip.trim_end_s) - s.start_s;
            }
        }
    }
    StatsReport {
        total_videos: clips.len(),
        excluded_videos: corpus.records.len().saturating_sub(clips.len()),
        over_budget_clips: clips.iter().filter(|c| c.over_budget).count(),
        avg_scenes_per_clip: scene_total as f64 / clips.len() as f64,
        avg_scene_duration_s: if scene_total > 0 {
            scene_duration / scene_total as f64
        } else {
            0.0
        },
        avg_clip_duration_s: clips.iter().map(|c| c.clip_duration_s).sum::<f64>() / clips.len() as f64,
        total_qa_pairs: qa_counts.values().sum(),
        ..StatsReport::default()
    }
}

fn compact(x: f64) -> String {
    let s = format!("{x:.1}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

impl StatsReport {
    pub fn with_permutation_counts(mut self, shuffled: usize, reversed: usize) -> Self {
        self.shuffled = shuffled;
        self.reversed = reversed;
        self
    }

    /// Aligned-column text with a numeric row and a qualitative row.
    pub fn render_table(&self, label: &str) -> String {
        let numeric = [
            ("", label.to_string()),
            ("Total Videos", self.total_videos.to_string()),
            ("Avg # of clips", compact(self.avg_scenes_per_clip)),
            ("Clip Duration", format!("{}s", compact(self.avg_scene_duration_s))),
            ("QA Pairs", self.total_qa_pairs.to_string()),
            ("Preference Records", self.preference_records.to_string()),
        ];
        let qualitative = [
            ("", label.to_string()),
            ("Shuffled", self.shuffled.to_string()),
            ("Reversed", self.reversed.to_string()),
            ("Pure Temporal", "yes".to_string()),
        ];
        let mut out = String::new();
        for table in [&numeric[..], &qualitative[..]] {
            let widths: Vec<usize> = table.iter().map(|(h, v)| h.len().max(v.len())).collect();
            let header: Vec<String> = table
                .iter()
                .zip(&widths)
                .map(|((h, _), w)| format!("{h:>w$}"))
                .collect();
            let row: Vec<String> = table
                .iter()
                .zip(&widths)
                .map(|((_, v), w)| format!("{v:>w$}"))
                .collect();
            let _ = writeln!(out, "{}", header.join("  ").trim_end());
            let _ = writeln!(out, "{}", row.join("  "));
            out.push('\n');
        }
        out
    }
}
