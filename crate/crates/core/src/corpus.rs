//! Ingestion and validation of scene-annotated video corpora.
//!
//! Two input shapes are accepted: the canonical JSONL format defined by this
//! crate, and FineVideo-style per-video JSON metadata. Both are normalized
//! into [`Corpus`], and every record that reaches the rest of the pipeline
//! has passed [`validate_record`].

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest::sha256_hex;

/// Allowed overlap between consecutive scenes, in seconds.
pub const OVERLAP_SLACK_S: f64 = 0.5;
/// Allowed shortfall of `duration_s` against the last scene end, in seconds.
pub const DURATION_SLACK_S: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub caption: String,
}

impl Scene {
    pub fn midpoint_s(&self) -> f64 {
        0.5 * (self.start_s + self.end_s)
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub media_path: String,
    pub duration_s: f64,
    pub scenes: Vec<Scene>,
}

impl VideoRecord {
    pub fn captions(&self) -> Vec<&str> {
        self.scenes.iter().map(|s| s.caption.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub records: Vec<VideoRecord>,
    pub source_name: String,
    pub manifest_digest: String,
}

impl Corpus {
    pub fn get(&self, video_id: &str) -> Option<&VideoRecord> {
        self.records
            .binary_search_by(|r| r.video_id.as_str().cmp(video_id))
            .ok()
            .map(|i| &self.records[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    FinevideoJson,
    CanonicalJsonl,
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "finevideo-json" => Ok(Self::FinevideoJson),
            "canonical-jsonl" => Ok(Self::CanonicalJsonl),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FinevideoJson => "finevideo-json",
            Self::CanonicalJsonl => "canonical-jsonl",
        })
    }
}

/// Which FineVideo scene field becomes the scene caption.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum CaptionField {
    /// Activity descriptions of the scene joined with a space.
    #[default]
    Activities,
    Title,
    /// Any scene-level string field, by key.
    Key(String),
}

impl FromStr for CaptionField {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "activities" => Self::Activities,
            "title" => Self::Title,
            other => Self::Key(other.to_string()),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub caption_field: CaptionField,
}

/// One structured invariant violation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub video_id: String,
    pub field: String,
    pub reason: String,
}

impl Diagnostic {
    fn new(video_id: &str, field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            video_id: video_id.to_string(),
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.video_id, self.field, self.reason)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("unknown corpus format `{0}` (expected finevideo-json or canonical-jsonl)")]
    UnknownFormat(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no valid records in {path} ({rejected} rejected)")]
    NoValidRecords { path: PathBuf, rejected: usize },
}

/// Result of a load: the accepted corpus plus diagnostics for every
/// rejected record.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub rejected: Vec<Diagnostic>,
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<LoadedCorpus, CorpusError> {
    load_corpus_with(path, format, &LoadOptions::default())
}

pub fn load_corpus_with(path: &Path, format: CorpusFormat, options: &LoadOptions) -> Result<LoadedCorpus, CorpusError> {
    let files = input_files(path, format)?;
    let mut digest_input = Vec::new();
    let mut candidates: Vec<Result<VideoRecord, Diagnostic>> = Vec::new();

    for file in &files {
        let bytes = fs::read(file).map_err(|source| CorpusError::Io {
            path: file.clone(),
            source,
        })?;
        if path.is_dir() {
            let name = file.file_name().unwrap_or_default().to_string_lossy();
            digest_input.extend_from_slice(name.as_bytes());
            digest_input.push(0);
            digest_input.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        }
        digest_input.extend_from_slice(&bytes);
        let text = String::from_utf8_lossy(&bytes);
        match format {
            CorpusFormat::CanonicalJsonl => candidates.extend(parse_canonical(&text)),
            CorpusFormat::FinevideoJson => candidates.extend(parse_finevideo(&text, file, &options.caption_field)),
        }
    }

    let mut rejected = Vec::new();
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for candidate in candidates {
        match candidate {
            Err(d) => rejected.push(d),
            Ok(record) => {
                let mut diags = validate_record(&record);
                if !seen.insert(record.video_id.clone()) {
                    diags.push(Diagnostic::new(&record.video_id, "video_id", "duplicate video_id"));
                }
                if diags.is_empty() {
                    records.push(record);
                } else {
                    rejected.extend(diags);
                }
            }
        }
    }
    for d in &rejected {
        log::warn!("rejected record: {d}");
    }
    if records.is_empty() {
        return Err(CorpusError::NoValidRecords {
            path: path.to_path_buf(),
            rejected: rejected.len(),
        });
    }
    records.sort_by(|a, b| a.video_id.cmp(&b.video_id));

    let source_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(LoadedCorpus {
        corpus: Corpus {
            records,
            source_name,
            manifest_digest: sha256_hex(&digest_input),
        },
        rejected,
    })
}

fn input_files(path: &Path, format: CorpusFormat) -> Result<Vec<PathBuf>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    if !path.is_dir() {
        fs::metadata(path).map_err(io_err)?;
        return Ok(vec![path.to_path_buf()]);
    }
    let ext = match format {
        CorpusFormat::CanonicalJsonl => "jsonl",
        CorpusFormat::FinevideoJson => "json",
    };
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// Checks every record-level invariant and returns all violations.
pub fn validate_record(record: &VideoRecord) -> Vec<Diagnostic> {
    let id = record.video_id.as_str();
    let mut out = Vec::new();
    if id.trim().is_empty() {
        out.push(Diagnostic::new(id, "video_id", "empty video_id"));
    }
    if !record.duration_s.is_finite() || record.duration_s < 0.0 {
        out.push(Diagnostic::new(id, "duration_s", "must be a non-negative number"));
    }
    if record.scenes.is_empty() {
        out.push(Diagnostic::new(id, "scenes", "at least one scene is required"));
        return out;
    }
    for (i, scene) in record.scenes.iter().enumerate() {
        if scene.index != i {
            out.push(Diagnostic::new(
                id,
                format!("scenes[{i}].index"),
                format!("expected {i}, found {}", scene.index),
            ));
        }
        if !(scene.start_s.is_finite() && scene.start_s >= 0.0) {
            out.push(Diagnostic::new(
                id,
                format!("scenes[{i}].start_s"),
                "must be a non-negative number",
            ));
        }
        if !(scene.end_s.is_finite() && scene.end_s > scene.start_s) {
            out.push(Diagnostic::new(
                id,
                format!("scenes[{i}].end_s"),
                format!("end_s {} must exceed start_s {}", scene.end_s, scene.start_s),
            ));
        }
        if scene.caption.trim().is_empty() {
            out.push(Diagnostic::new(id, format!("scenes[{i}].caption"), "caption is empty"));
        }
    }
    for (i, pair) in record.scenes.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        if b.start_s < a.start_s {
            out.push(Diagnostic::new(
                id,
                format!("scenes[{}].start_s", i + 1),
                format!("scenes not sorted: start {} precedes {}", b.start_s, a.start_s),
            ));
        } else if a.end_s > b.start_s + OVERLAP_SLACK_S {
            out.push(Diagnostic::new(
                id,
                format!("scenes[{i}..{}]", i + 1),
                format!(
                    "scenes {i} and {} overlap: end {} > next start {} + {OVERLAP_SLACK_S}",
                    i + 1,
                    a.end_s,
                    b.start_s
                ),
            ));
        }
    }
    let last_end = record.scenes.last().map(|s| s.end_s).unwrap_or(0.0);
    if record.duration_s < last_end - DURATION_SLACK_S {
        out.push(Diagnostic::new(
            id,
            "duration_s",
            format!("duration {} shorter than last scene end {last_end}", record.duration_s),
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordValidation {
    pub video_id: String,
    pub passed: bool,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub records: Vec<RecordValidation>,
    pub failures: usize,
}

pub fn validate_corpus(corpus: &Corpus) -> ValidationReport {
    let mut seen = BTreeSet::new();
    let records: Vec<RecordValidation> = corpus
        .records
        .iter()
        .map(|r| {
            let mut diagnostics = validate_record(r);
            if !seen.insert(r.video_id.as_str()) {
                diagnostics.push(Diagnostic::new(&r.video_id, "video_id", "duplicate video_id"));
            }
            RecordValidation {
                video_id: r.video_id.clone(),
                passed: diagnostics.is_empty(),
                diagnostics,
            }
        })
        .collect();
    let failures = records.iter().filter(|r| !r.passed).count();
    ValidationReport { records, failures }
}

#[derive(Serialize)]
struct CanonicalScene<'a> {
    start_s: f64,
    end_s: f64,
    caption: &'a str,
}

#[derive(Serialize)]
struct CanonicalRecord<'a> {
    video_id: &'a str,
    media_path: &'a str,
    duration_s: f64,
    scenes: Vec<CanonicalScene<'a>>,
}

/// Serializes records in canonical JSONL form.
pub fn to_canonical_jsonl(records: &[VideoRecord]) -> String {
    let wire: Vec<CanonicalRecord<'_>> = records
        .iter()
        .map(|r| CanonicalRecord {
            video_id: &r.video_id,
            media_path: &r.media_path,
            duration_s: r.duration_s,
            scenes: r
                .scenes
                .iter()
                .map(|s| CanonicalScene {
                    start_s: s.start_s,
                    end_s: s.end_s,
                    caption: &s.caption,
                })
                .collect(),
        })
        .collect();
    crate::jsonl::to_jsonl_string(&wire)
}

fn parse_canonical(text: &str) -> Vec<Result<VideoRecord, Diagnostic>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let where_ = format!("<line {}>", n + 1);
            let value: Value =
                serde_json::from_str(line).map_err(|e| Diagnostic::new(&where_, "json", e.to_string()))?;
            canonical_record(&value, &where_)
        })
        .collect()
}

fn canonical_record(value: &Value, where_: &str) -> Result<VideoRecord, Diagnostic> {
    let video_id = str_field(value, "video_id", where_)?;
    let id = video_id.as_str();
    let media_path = str_field(value, "media_path", id)?;
    let duration_s = num_field(value, "duration_s", id)?;
    let scenes_v = value
        .get("scenes")
        .and_then(Value::as_array)
        .ok_or_else(|| Diagnostic::new(id, "scenes", "missing or not an array"))?;
    let mut scenes = Vec::with_capacity(scenes_v.len());
    for (i, s) in scenes_v.iter().enumerate() {
        let field = |name: &str| format!("scenes[{i}].{name}");
        let start_s = s
            .get("start_s")
            .and_then(Value::as_f64)
            .ok_or_else(|| Diagnostic::new(id, field("start_s"), "missing or not a number"))?;
        let end_s = s
            .get("end_s")
            .and_then(Value::as_f64)
            .ok_or_else(|| Diagnostic::new(id, field("end_s"), "missing or not a number"))?;
        let caption = s
            .get("caption")
            .and_then(Value::as_str)
            .ok_or_else(|| Diagnostic::new(id, field("caption"), "missing or not a string"))?;
        scenes.push(Scene {
            index: i,
            start_s,
            end_s,
            caption: caption.to_string(),
        });
    }
    Ok(VideoRecord {
        video_id,
        media_path,
        duration_s,
        scenes,
    })
}

fn str_field(value: &Value, key: &str, who: &str) -> Result<String, Diagnostic> {
    value
        .get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Diagnostic::new(who, key, "missing or not a string"))
}

fn num_field(value: &Value, key: &str, who: &str) -> Result<f64, Diagnostic> {
    value
        .get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| Diagnostic::new(who, key, "missing or not a number"))
}

/// Parses `HH:MM:SS(.fff)`, `MM:SS(.fff)`, plain seconds strings or numbers.
pub fn parse_timestamp(value: &Value) -> Option<f64> {
    if let Some(n) = value.as_f64() {
        return Some(n);
    }
    let s = value.as_str()?.trim();
    let mut total = 0.0;
    for part in s.split(':') {
        let v: f64 = part.parse().ok()?;
        total = total * 60.0 + v;
    }
    Some(total)
}

fn parse_finevideo(text: &str, file: &Path, caption_field: &CaptionField) -> Vec<Result<VideoRecord, Diagnostic>> {
    let stem = file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let value: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return vec![Err(Diagnostic::new(&stem, "json", e.to_string()))],
    };
    match value {
        Value::Array(items) => items
            .iter()
            .enumerate()
            .map(|(i, item)| finevideo_record(item, &format!("{stem}_{i}"), file, caption_field))
            .collect(),
        item => vec![finevideo_record(&item, &stem, file, caption_field)],
    }
}

fn finevideo_record(
    item: &Value,
    fallback_id: &str,
    file: &Path,
    caption_field: &CaptionField,
) -> Result<VideoRecord, Diagnostic> {
    let original = item.get("original_video_filename").and_then(Value::as_str);
    let video_id = item
        .get("video_id")
        .and_then(Value::as_str)
        .map(str::to_string)
        .or_else(|| {
            original.map(|o| {
                Path::new(o)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| o.to_string())
            })
        })
        .unwrap_or_else(|| fallback_id.to_string());
    let id = video_id.as_str();
    let media_path = item
        .get("media_path")
        .and_then(Value::as_str)
        .map(str::to_string)
        .unwrap_or_else(|| {
            let name = original.map(str::to_string).unwrap_or(format!("{id}.mp4"));
            file.with_file_name(name).display().to_string()
        });
    let duration_s = item
        .get("duration_seconds")
        .or_else(|| item.get("duration_s"))
        .and_then(parse_timestamp)
        .ok_or_else(|| Diagnostic::new(id, "duration_seconds", "missing or not a number"))?;
    let scenes_v = item
        .pointer("/content_metadata/scenes")
        .or_else(|| item.get("scenes"))
        .and_then(Value::as_array)
        .ok_or_else(|| Diagnostic::new(id, "content_metadata.scenes", "missing or not an array"))?;

    let mut scenes = Vec::with_capacity(scenes_v.len());
    for (i, s) in scenes_v.iter().enumerate() {
        let field = |name: &str| format!("scenes[{i}].{name}");
        let ts = s.get("timestamps").unwrap_or(s);
        let start_s = ts
            .get("start_timestamp")
            .and_then(parse_timestamp)
            .ok_or_else(|| Diagnostic::new(id, field("start_timestamp"), "missing or unparseable"))?;
        let end_s = ts
            .get("end_timestamp")
            .and_then(parse_timestamp)
            .ok_or_else(|| Diagnostic::new(id, field("end_timestamp"), "missing or unparseable"))?;
        let caption = match caption_field {
            CaptionField::Activities => s.get("activities").and_then(Value::as_array).map(|acts| {
                acts.iter()
                    .filter_map(|a| a.get("description").and_then(Value::as_str))
                    .map(str::trim)
                    .filter(|d| !d.is_empty())
                    .collect::<Vec<_>>()
                    .join(" ")
            }),
            CaptionField::Title => s.get("title").and_then(Value::as_str).map(str::to_string),
            CaptionField::Key(k) => s.get(k).and_then(Value::as_str).map(str::to_string),
        }
        .ok_or_else(|| Diagnostic::new(id, field("caption"), "caption source field missing"))?;
        scenes.push(Scene {
            index: i,
            start_s,
            end_s,
            caption,
        });
    }
    Ok(VideoRecord {
        video_id,
        media_path,
        duration_s,
        scenes,
    })
}
