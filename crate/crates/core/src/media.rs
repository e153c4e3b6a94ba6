//! Media edit plans: scene cuts, permuted re-concatenation, uniform frame
//! extraction and frame perturbations, expressed as fully resolved ffmpeg
//! argument vectors. Plans are data; [`execute_plan`] runs them.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::VideoRecord;
use crate::permute::ScenePermutation;
use crate::preprocess::ClipSpec;

pub const DEFAULT_FRAMES: usize = 10;
pub const DEFAULT_FRAME_SIZE: (u32, u32) = (640, 360);
pub const DEFAULT_DOWNSCALE: f64 = 0.25;
pub const DEFAULT_HUE_SHIFT_DEG: f64 = 90.0;

// Fixed encoder settings so concatenated segments share one stream layout.
const ENCODE: [&str; 10] = [
    "-c:v", "libx264", "-preset", "veryfast", "-crf", "18", "-pix_fmt", "yuv420p", "-r", "30",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Cut,
    Concat,
    ExtractFrames,
    Perturb,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandStep {
    pub tool: String,
    pub argv: Vec<String>,
    pub purpose: Purpose,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaPlan {
    pub video_id: String,
    pub steps: Vec<CommandStep>,
    pub outputs: Vec<String>,
    pub dry_run: bool,
}

impl MediaPlan {
    /// Checks that outputs are unique, live under `out_dir`, and that every
    /// step input is either produced earlier or satisfies `exists`.
    pub fn check(&self, out_dir: &Path, exists: impl Fn(&str) -> bool) -> Vec<String> {
        let mut issues = Vec::new();
        let mut produced = BTreeSet::new();
        for (i, step) in self.steps.iter().enumerate() {
            for input in &step.inputs {
                if !produced.contains(input.as_str()) && !exists(input) {
                    issues.push(format!("step {i}: input {input} is neither present nor produced"));
                }
            }
            for output in &step.outputs {
                if !Path::new(output).starts_with(out_dir) {
                    issues.push(format!("step {i}: output {output} outside {}", out_dir.display()));
                }
                if !produced.insert(output.as_str()) {
                    issues.push(format!("step {i}: output {output} written twice"));
                }
            }
        }
        issues
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationSpec {
    Downscale {
        downscale_factor: f64,
    },
    ColorDistort {
        channel_map: [usize; 3],
        #[serde(default)]
        hue_shift_deg: f64,
    },
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<(), MediaError> {
        match *self {
            Self::Downscale { downscale_factor } => {
                if !(downscale_factor > 0.0 && downscale_factor < 1.0) {
                    return Err(MediaError::InvalidSpec(format!(
                        "downscale_factor {downscale_factor} not in (0, 1)"
                    )));
                }
            }
            Self::ColorDistort {
                channel_map,
                hue_shift_deg,
            } => {
                let mut sorted = channel_map;
                sorted.sort_unstable();
                if sorted != [0, 1, 2] {
                    return Err(MediaError::InvalidSpec(format!(
                        "channel_map {channel_map:?} is not a permutation of [0, 1, 2]"
                    )));
                }
                if !hue_shift_deg.is_finite() {
                    return Err(MediaError::InvalidSpec("hue shift must be finite".into()));
                }
                if channel_map == [0, 1, 2] && hue_shift_deg.rem_euclid(360.0) == 0.0 {
                    return Err(MediaError::InvalidSpec(
                        "identity channel map without hue shift does not perturb".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Short directory-safe label, also used as the perturbation reference
    /// in preference records.
    pub fn tag(&self) -> String {
        match *self {
            Self::Downscale { downscale_factor } => format!("downscale_{downscale_factor}"),
            Self::ColorDistort {
                channel_map,
                hue_shift_deg,
            } => format!(
                "color_{}{}{}_h{hue_shift_deg}",
                channel_map[0], channel_map[1], channel_map[2]
            ),
        }
    }

    /// The ffmpeg filter graph for a frame of `size`.
    pub fn filter(&self, size: (u32, u32)) -> String {
        match *self {
            Self::Downscale { downscale_factor } => {
                let (w, h) = downscaled(size, downscale_factor);
                format!("scale={w}:{h}:flags=area,scale={}:{}:flags=neighbor", size.0, size.1)
            }
            Self::ColorDistort {
                channel_map,
                hue_shift_deg,
            } => {
                let names = ['r', 'g', 'b'];
                let coeffs: Vec<String> = (0..3)
                    .flat_map(|out| {
                        (0..3).map(move |src| {
                            let on = u8::from(channel_map[out] == src);
                            format!("{}{}={on}", names[out], names[src])
                        })
                    })
                    .collect();
                let mut f = format!("colorchannelmixer={}", coeffs.join(":"));
                if hue_shift_deg.rem_euclid(360.0) != 0.0 {
                    f.push_str(&format!(",hue=h={hue_shift_deg}"));
                }
                f
            }
        }
    }
}

impl fmt::Display for PerturbationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

/// Intermediate resolution of a downscale perturbation.
pub fn downscaled(size: (u32, u32), factor: f64) -> (u32, u32) {
    let scale = |v: u32| ((v as f64 * factor).round() as u32).max(1);
    (scale(size.0), scale(size.1))
}

#[derive(Debug, thiserror::Error)]
pub enum MediaError {
    #[error("media file {path} for {video_id} is missing; plan forced to dry-run")]
    MediaMissing {
        video_id: String,
        path: String,
        plan: Box<MediaPlan>,
    },
    #[error("clip or permutation does not belong to {0}")]
    Mismatch(String),
    #[error("invalid perturbation: {0}")]
    InvalidSpec(String),
    #[error("media toolkit `{0}` is not available")]
    ToolkitUnavailable(String),
    #[error("step {index} ({purpose:?}) exited with {code:?}: {stderr}")]
    StepFailed {
        index: usize,
        purpose: Purpose,
        code: Option<i32>,
        stderr: String,
    },
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn secs(x: f64) -> String {
    format!("{x:.3}")
}

fn ffmpeg_step(argv: Vec<String>, purpose: Purpose, inputs: Vec<String>, output: String) -> CommandStep {
    CommandStep {
        tool: "ffmpeg".into(),
        argv,
        purpose,
        inputs,
        outputs: vec![output],
    }
}

fn base_args() -> Vec<String> {
    ["-hide_banner", "-nostdin", "-loglevel", "error", "-y"]
        .iter()
        .map(|a| a.to_string())
        .collect()
}

/// Where [`plan_clip_render`] writes a clip; `label` is `original` or the
/// permutation kind.
pub fn rendered_clip_path(out_dir: &Path, video_id: &str, label: &str) -> String {
    s(&out_dir.join(video_id).join(format!("{video_id}_{label}.mp4")))
}

/// Cuts every kept scene and concatenates the segments in permutation order
/// (original order when `perm` is absent).
pub fn plan_clip_render(
    record: &VideoRecord,
    clip: &ClipSpec,
    perm: Option<&ScenePermutation>,
    out_dir: &Path,
) -> Result<MediaPlan, MediaError> {
    if clip.video_id != record.video_id
        || perm.is_some_and(|p| p.video_id != record.video_id || p.pi.len() != clip.scene_count())
        || clip.kept_scene_indices.iter().any(|&i| i >= record.scenes.len())
    {
        return Err(MediaError::Mismatch(record.video_id.clone()));
    }
    let dir = out_dir.join(&record.video_id);
    let mut steps = Vec::new();
    let mut segments = Vec::new();
    for &i in &clip.kept_scene_indices {
        let scene = &record.scenes[i];
        let end = scene.end_s.min(clip.trim_end_s);
        let seg = s(&dir.join(format!("seg_{i:03}.mp4")));
        let mut argv = base_args();
        argv.extend([
            "-ss".into(),
            secs(scene.start_s),
            "-t".into(),
            secs(end - scene.start_s),
            "-i".into(),
            record.media_path.clone(),
            "-an".into(),
        ]);
        argv.extend(ENCODE.iter().map(|a| a.to_string()));
        argv.push(seg.clone());
        steps.push(ffmpeg_step(
            argv,
            Purpose::Cut,
            vec![record.media_path.clone()],
            seg.clone(),
        ));
        segments.push(seg);
    }

    let (order, label) = match perm {
        Some(p) => (p.pi.clone(), p.kind.to_string()),
        None => ((0..segments.len()).collect(), "original".to_string()),
    };
    let ordered: Vec<String> = order.iter().map(|&k| segments[k].clone()).collect();
    let output = rendered_clip_path(out_dir, &record.video_id, &label);
    let mut argv = base_args();
    for seg in &ordered {
        argv.push("-i".into());
        argv.push(seg.clone());
    }
    let pads: String = (0..ordered.len()).map(|k| format!("[{k}:v]")).collect();
    argv.extend([
        "-filter_complex".into(),
        format!("{pads}concat=n={}:v=1:a=0[v]", ordered.len()),
        "-map".into(),
        "[v]".into(),
    ]);
    argv.extend(ENCODE.iter().map(|a| a.to_string()));
    argv.push(output.clone());
    steps.push(ffmpeg_step(argv, Purpose::Concat, ordered, output.clone()));

    let mut plan = MediaPlan {
        video_id: record.video_id.clone(),
        steps,
        outputs: vec![output],
        dry_run: false,
    };
    if record.media_path.is_empty() || !Path::new(&record.media_path).exists() {
        plan.dry_run = true;
        return Err(MediaError::MediaMissing {
            video_id: record.video_id.clone(),
            path: record.media_path.clone(),
            plan: Box::new(plan),
        });
    }
    Ok(plan)
}

/// `t_k = (k + 0.5) * duration / n` for `k = 0..n`.
pub fn frame_timestamps(duration_s: f64, n_frames: usize) -> Vec<f64> {
    (0..n_frames)
        .map(|k| (k as f64 + 0.5) * duration_s / n_frames as f64)
        .collect()
}

/// Samples `n_frames` uniformly spaced frames, letterboxed to `frame_size`.
pub fn plan_frame_extraction(
    video_id: &str,
    clip_path: &str,
    clip_duration_s: f64,
    n_frames: usize,
    frame_size: (u32, u32),
    out_dir: &Path,
) -> MediaPlan {
    let n_frames = n_frames.max(1);
    let dir = out_dir.join(video_id).join("frames");
    let (w, h) = frame_size;
    let fit = format!("scale={w}:{h}:force_original_aspect_ratio=decrease,pad={w}:{h}:(ow-iw)/2:(oh-ih)/2");
    let steps: Vec<CommandStep> = frame_timestamps(clip_duration_s, n_frames)
        .into_iter()
        .enumerate()
        .map(|(k, t)| {
            let out = s(&dir.join(format!("frame_{k:02}.jpg")));
            let mut argv = base_args();
            argv.extend([
                "-ss".into(),
                secs(t),
                "-i".into(),
                clip_path.to_string(),
                "-frames:v".into(),
                "1".into(),
                "-vf".into(),
                fit.clone(),
                "-q:v".into(),
                "2".into(),
                out.clone(),
            ]);
            ffmpeg_step(argv, Purpose::ExtractFrames, vec![clip_path.to_string()], out)
        })
        .collect();
    MediaPlan {
        video_id: video_id.to_string(),
        outputs: steps.iter().flat_map(|st| st.outputs.clone()).collect(),
        steps,
        dry_run: false,
    }
}

/// Applies `spec` to every frame, writing under `out_dir/<tag>/`.
pub fn plan_perturbation(
    video_id: &str,
    frames: &[String],
    spec: &PerturbationSpec,
    frame_size: (u32, u32),
    out_dir: &Path,
) -> Result<MediaPlan, MediaError> {
    spec.validate()?;
    if frames.is_empty() {
        return Err(MediaError::InvalidSpec("no frames to perturb".into()));
    }
    let dir = out_dir.join(video_id).join(spec.tag());
    let filter = spec.filter(frame_size);
    let steps: Vec<CommandStep> = frames
        .iter()
        .map(|frame| {
            let name = Path::new(frame)
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| frame.clone());
            let out = s(&dir.join(name));
            let mut argv = base_args();
            argv.extend([
                "-i".into(),
                frame.clone(),
                "-vf".into(),
                filter.clone(),
                "-q:v".into(),
                "2".into(),
                out.clone(),
            ]);
            ffmpeg_step(argv, Purpose::Perturb, vec![frame.clone()], out)
        })
        .collect();
    Ok(MediaPlan {
        video_id: video_id.to_string(),
        outputs: steps.iter().flat_map(|st| st.outputs.clone()).collect(),
        steps,
        dry_run: false,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StepStatus {
    Skipped,
    Ok,
    Failed { code: Option<i32>, stderr: String },
    NotRun,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepReport {
    pub purpose: Purpose,
    #[serde(flatten)]
    pub status: StepStatus,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub video_id: String,
    pub steps: Vec<StepReport>,
}

impl ExecutionReport {
    /// Turns the first failed step into [`MediaError::StepFailed`].
    pub fn into_result(self) -> Result<Self, MediaError> {
        let failed = self.steps.iter().enumerate().find_map(|(i, st)| match &st.status {
            StepStatus::Failed { code, stderr } => Some((i, st.purpose, *code, stderr.clone())),
            _ => None,
        });
        match failed {
            Some((index, purpose, code, stderr)) => Err(MediaError::StepFailed {
                index,
                purpose,
                code,
                stderr,
            }),
            None => Ok(self),
        }
    }
}

/// Locates and runs the media toolkit.
#[derive(Debug, Clone)]
pub struct Toolkit {
    pub program: PathBuf,
    /// Directory relative plan paths resolve against; the process working
    /// directory when absent.
    pub workdir: Option<PathBuf>,
}

impl Default for Toolkit {
    fn default() -> Self {
        Self::new("ffmpeg")
    }
}

impl Toolkit {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            workdir: None,
        }
    }

    pub fn in_dir(mut self, workdir: impl Into<PathBuf>) -> Self {
        self.workdir = Some(workdir.into());
        self
    }

    pub fn available(&self) -> bool {
        Command::new(&self.program)
            .arg("-version")
            .output()
            .is_ok_and(|o| o.status.success())
    }
}

/// Runs a plan step by step. A failed step stops the rest of this plan;
/// the returned report records the failure (see [`ExecutionReport::into_result`]).
pub fn execute_plan(plan: &MediaPlan, toolkit: &Toolkit) -> Result<ExecutionReport, MediaError> {
    let mut report = ExecutionReport {
        video_id: plan.video_id.clone(),
        steps: Vec::with_capacity(plan.steps.len()),
    };
    if plan.dry_run {
        report.steps = plan
            .steps
            .iter()
            .map(|st| StepReport {
                purpose: st.purpose,
                status: StepStatus::Skipped,
                duration_ms: 0,
            })
            .collect();
        return Ok(report);
    }
    if !toolkit.available() {
        return Err(MediaError::ToolkitUnavailable(toolkit.program.display().to_string()));
    }
    let mut failed = false;
    for step in &plan.steps {
        if failed {
            report.steps.push(StepReport {
                purpose: step.purpose,
                status: StepStatus::NotRun,
                duration_ms: 0,
            });
            continue;
        }
        for out in &step.outputs {
            let out = match &toolkit.workdir {
                Some(dir) => dir.join(out),
                None => PathBuf::from(out),
            };
            if let Some(parent) = out.parent() {
                let _ = std::fs::create_dir_all(parent);
            }
        }
        let started = Instant::now();
        let mut command = Command::new(&toolkit.program);
        command.args(&step.argv);
        if let Some(dir) = &toolkit.workdir {
            command.current_dir(dir);
        }
        let status = match command.output() {
            Ok(o) if o.status.success() => StepStatus::Ok,
            Ok(o) => StepStatus::Failed {
                code: o.status.code(),
                stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
            },
            Err(e) => StepStatus::Failed {
                code: None,
                stderr: e.to_string(),
            },
        };
        failed = matches!(status, StepStatus::Failed { .. });
        report.steps.push(StepReport {
            purpose: step.purpose,
            status,
            duration_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok(report)
}
