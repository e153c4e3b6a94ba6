//! Pipeline stages. Each stage reads prior outputs from the output
//! directory and returns its own outputs as bytes; the driver in `lib.rs`
//! writes them and records digests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use timewarp_core::benchgen::{
    build_mcqa_items, build_order_probes, select_probe_videos, BenchInputs, BenchmarkItem, OrderStatement,
};
use timewarp_core::corpus::{
    load_corpus, load_corpus_with, to_canonical_jsonl, validate_corpus, Corpus, CorpusFormat, LoadOptions, VideoRecord,
};
use timewarp_core::datasets::{
    build_explicit_pairs, build_implicit_pairs, difficulty_probe, dpo_to_kto, export_sft, merge_mixture, sample_kto,
    ClipPaths, Generator, ImplicitInputs, ImplicitMode, KtoRecord, MixturePart, PreferenceRecord,
};
use timewarp_core::eval::{
    build_quads, grade_order_probes, random_mcqa_predictions, random_probe_predictions, random_quad_predictions,
    score_group, score_mcqa, strictness_sweep, PredictionLine, QuadruplePrediction,
};
use timewarp_core::jsonl::{parse_jsonl, read_jsonl, to_jsonl_string};
use timewarp_core::llmclient::{Backend, Client, DiskCache, HttpBackend, MockBackend, RetryPolicy};
use timewarp_core::media::{
    execute_plan, plan_clip_render, plan_frame_extraction, plan_perturbation, rendered_clip_path, MediaError,
    MediaPlan, Toolkit,
};
use timewarp_core::permute::{plan_negative_set, PermKind, ScenePermutation};
use timewarp_core::preprocess::{build_composite_caption, corpus_stats, trim_corpus, ClipSpec};
use timewarp_core::promptkit::{parse_oe_qa, placeholders, TemplateId};
use timewarp_core::verify::{dpo_grad, dpo_loss};
use timewarp_core::LogProbs;

use crate::config::{BackendKind, RunConfig};

/// Rendered media lives under this directory of the output tree.
pub const MEDIA_DIR: &str = "media";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Trim,
    Permute,
    Render,
    GenExplicit,
    GenImplicit,
    ToKto,
    Merge,
    BenchMcqa,
    BenchProbes,
    ScoreMcqa,
    ScoreGroup,
    GradeProbes,
    VerifyLoss,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 15] = [
        Stage::Ingest,
        Stage::Trim,
        Stage::Permute,
        Stage::Render,
        Stage::GenExplicit,
        Stage::GenImplicit,
        Stage::ToKto,
        Stage::Merge,
        Stage::BenchMcqa,
        Stage::BenchProbes,
        Stage::ScoreMcqa,
        Stage::ScoreGroup,
        Stage::GradeProbes,
        Stage::VerifyLoss,
        Stage::Stats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Trim => "trim",
            Stage::Permute => "permute",
            Stage::Render => "render",
            Stage::GenExplicit => "gen-explicit",
            Stage::GenImplicit => "gen-implicit",
            Stage::ToKto => "to-kto",
            Stage::Merge => "merge",
            Stage::BenchMcqa => "bench-mcqa",
            Stage::BenchProbes => "bench-probes",
            Stage::ScoreMcqa => "score-mcqa",
            Stage::ScoreGroup => "score-group",
            Stage::GradeProbes => "grade-probes",
            Stage::VerifyLoss => "verify-loss",
            Stage::Stats => "stats",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Ingest | VerifyLoss => &[],
            Trim | BenchProbes => &[Ingest],
            Permute => &[Trim],
            Render | GenExplicit | BenchMcqa => &[Ingest, Trim, Permute],
            GenImplicit => &[Ingest, Trim, Render],
            ToKto | ScoreGroup => &[GenExplicit],
            Merge => &[GenExplicit, GenImplicit],
            ScoreMcqa => &[BenchMcqa],
            GradeProbes => &[BenchProbes],
            Stats => &[Ingest, Trim, Permute, GenExplicit, GenImplicit],
        }
    }

    /// Files outside the output directory that the stage reads.
    pub fn external_inputs(self, cfg: &RunConfig) -> Vec<PathBuf> {
        let mut out = Vec::new();
        match self {
            Stage::Ingest => out.extend(corpus_files(&cfg.corpus.path, cfg.corpus_format())),
            Stage::Merge => out.extend(
                cfg.mixture
                    .parts
                    .iter()
                    .filter(|p| !matches!(p.source.as_str(), "explicit" | "implicit"))
                    .map(|p| PathBuf::from(&p.source)),
            ),
            Stage::ScoreMcqa => out.extend(cfg.eval.mcqa_predictions.clone()),
            Stage::ScoreGroup => out.extend(cfg.eval.quad_predictions.clone()),
            Stage::GradeProbes => out.extend(cfg.eval.probe_predictions.clone()),
            Stage::VerifyLoss => out.extend(cfg.verify.batch.clone()),
            Stage::GenExplicit | Stage::GenImplicit | Stage::BenchMcqa => {
                if let Some(dir) = &cfg.backend.templates_dir {
                    out.extend(
                        TemplateId::all()
                            .into_iter()
                            .map(|id| dir.join(format!("{id}.txt")))
                            .filter(|p| p.exists()),
                    );
                }
            }
            _ => {}
        }
        out
    }

    /// Configuration the stage's outputs depend on.
    pub fn params(self, cfg: &RunConfig) -> Value {
        let backend = json!({
            "kind": cfg.backend.kind,
            "endpoint": cfg.backend.endpoint,
            "model_id": cfg.backend.model_id,
        });
        match self {
            Stage::Ingest => json!({"format": cfg.corpus.format, "caption_field": cfg.corpus.caption_field}),
            Stage::Trim => json!(cfg.trim),
            Stage::Permute => json!({"permute": cfg.permute, "seed": cfg.seed}),
            Stage::Render => json!({"media": cfg.media, "dry_run": cfg.dry_run}),
            Stage::GenExplicit | Stage::BenchMcqa => json!({"backend": backend}),
            Stage::GenImplicit => json!({
                "backend": backend,
                "implicit": cfg.implicit,
                "n_frames": cfg.media.n_frames,
                "frame_size": cfg.media.frame_size,
                "perturbation": cfg.media.perturbation,
            }),
            Stage::ToKto => json!({"kto": cfg.kto, "seed": cfg.seed}),
            Stage::Merge => json!({"mixture": cfg.mixture, "seed": cfg.seed}),
            Stage::BenchProbes => json!({"probes": cfg.probes, "seed": cfg.seed}),
            Stage::ScoreMcqa | Stage::ScoreGroup | Stage::GradeProbes => json!({"eval": cfg.eval, "seed": cfg.seed}),
            Stage::VerifyLoss => json!({"verify": cfg.verify, "seed": cfg.seed}),
            Stage::Stats => json!({"difficulty": cfg.difficulty}),
        }
    }

    pub fn run(self, cx: &Cx<'_>) -> Result<StageOutput> {
        match self {
            Stage::Ingest => ingest(cx),
            Stage::Trim => trim(cx),
            Stage::Permute => permute(cx),
            Stage::Render => render(cx),
            Stage::GenExplicit => gen_explicit(cx),
            Stage::GenImplicit => gen_implicit(cx),
            Stage::ToKto => to_kto(cx),
            Stage::Merge => merge(cx),
            Stage::BenchMcqa => bench_mcqa(cx),
            Stage::BenchProbes => bench_probes(cx),
            Stage::ScoreMcqa => score_mcqa_stage(cx),
            Stage::ScoreGroup => score_group_stage(cx),
            Stage::GradeProbes => grade_probes(cx),
            Stage::VerifyLoss => verify_loss(cx),
            Stage::Stats => stats(cx),
        }
    }
}

fn corpus_files(path: &Path, format: CorpusFormat) -> Vec<PathBuf> {
    if !path.is_dir() {
        return vec![path.to_path_buf()];
    }
    let ext = match format {
        CorpusFormat::CanonicalJsonl => "jsonl",
        CorpusFormat::FinevideoJson => "json",
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map(|rd| {
            rd.filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == ext))
                .collect()
        })
        .unwrap_or_default();
    files.sort();
    files
}

/// Stage results: files to write (relative to the output directory),
/// files the stage already wrote itself, and a one-line summary.
#[derive(Debug, Default)]
pub struct StageOutput {
    pub files: Vec<(String, Vec<u8>)>,
    pub written: Vec<String>,
    pub summary: String,
}

impl StageOutput {
    fn jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) {
        self.files.push((name.to_string(), to_jsonl_string(items).into_bytes()));
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut bytes = serde_json::to_vec_pretty(value).expect("serializable report");
        bytes.push(b'\n');
        self.files.push((name.to_string(), bytes));
    }

    fn text(&mut self, name: &str, text: String) {
        self.files.push((name.to_string(), text.into_bytes()));
    }

    fn lines(&mut self, name: &str, lines: &[String]) {
        let mut text = lines.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        self.text(name, text);
    }
}

/// Stage context.
pub struct Cx<'a> {
    pub cfg: &'a RunConfig,
    pub out: &'a Path,
}

impl Cx<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn read<T: serde::de::DeserializeOwned>(&self, rel: &str) -> Result<Vec<T>> {
        read_jsonl(&self.path(rel)).with_context(|| format!("reading {rel}"))
    }

    fn corpus(&self) -> Result<Corpus> {
        Ok(load_corpus(&self.path("corpus.jsonl"), CorpusFormat::CanonicalJsonl)?.corpus)
    }

    fn clips(&self) -> Result<Vec<ClipSpec>> {
        self.read("clips.jsonl")
    }

    fn permutations(&self) -> Result<BTreeMap<String, ScenePermutation>> {
        Ok(self
            .read::<ScenePermutation>("permutations.jsonl")?
            .into_iter()
            .map(|p| (p.video_id.clone(), p))
            .collect())
    }

    fn client(&self) -> Result<Client> {
        let b = &self.cfg.backend;
        let backend: Arc<dyn Backend> = match b.kind {
            BackendKind::Mock => Arc::new(MockBackend),
            BackendKind::Http => Arc::new(HttpBackend::from_env(
                b.endpoint.as_deref().expect("validated"),
                &b.credential_env,
                Duration::from_secs(b.timeout_s),
            )?),
        };
        let mut client = Client::new(backend)
            .with_concurrency(b.concurrency)
            .with_retry(RetryPolicy {
                max_attempts: b.max_attempts,
                ..RetryPolicy::default()
            });
        if let Some(dir) = &b.cache_dir {
            client = client.with_cache(DiskCache::new(dir));
        }
        Ok(client)
    }

    /// Media paths in the corpus are relative to the corpus location.
    fn media_source(&self, record: &VideoRecord) -> VideoRecord {
        let mut r = record.clone();
        let p = Path::new(&record.media_path);
        if !record.media_path.is_empty() && p.is_relative() {
            let base = if self.cfg.corpus.path.is_dir() {
                self.cfg.corpus.path.clone()
            } else {
                self.cfg.corpus.path.parent().map(Path::to_path_buf).unwrap_or_default()
            };
            r.media_path = base.join(p).display().to_string();
        }
        r
    }
}

fn clip_path(video_id: &str, label: &str) -> String {
    rendered_clip_path(Path::new(MEDIA_DIR), video_id, label)
}

/// Maps `f` over `items` on up to `workers` threads, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("result slot").expect("every item mapped"))
        .collect()
}

fn ingest(cx: &Cx<'_>) -> Result<StageOutput> {
    let cfg = cx.cfg;
    let options = LoadOptions {
        caption_field: cfg.caption_field(),
    };
    let loaded = load_corpus_with(&cfg.corpus.path, cfg.corpus_format(), &options)?;
    let report = validate_corpus(&loaded.corpus);
    let mut out = StageOutput::default();
    out.text("corpus.jsonl", to_canonical_jsonl(&loaded.corpus.records));
    out.json(
        "validation.json",
        &json!({
            "format": cfg.corpus.format,
            "source_digest": loaded.corpus.manifest_digest,
            "accepted": loaded.corpus.records.len(),
            "rejected": loaded.rejected,
            "validation_failures": report.failures,
        }),
    );
    out.summary = format!(
        "{} records, {} rejected",
        loaded.corpus.records.len(),
        loaded.rejected.len()
    );
    Ok(out)
}

fn trim(cx: &Cx<'_>) -> Result<StageOutput> {
    let corpus = cx.corpus()?;
    let outcome = trim_corpus(&corpus, cx.cfg.trim.max_s, cx.cfg.trim.min_scenes);
    let mut out = StageOutput::default();
    out.jsonl("clips.jsonl", &outcome.clips);
    out.json("trim_excluded.json", &json!({"excluded": outcome.excluded}));
    out.summary = format!(
        "{} clips, {} excluded, {} over budget",
        outcome.clips.len(),
        outcome.excluded.len(),
        outcome.clips.iter().filter(|c| c.over_budget).count()
    );
    Ok(out)
}

fn permute(cx: &Cx<'_>) -> Result<StageOutput> {
    let clips = cx.clips()?;
    let plan = plan_negative_set(&clips, cx.cfg.permute.shuffle_fraction, cx.cfg.seed)?;
    let mut out = StageOutput::default();
    out.jsonl("permutations.jsonl", &plan.permutations);
    out.summary = format!("{} shuffled, {} reversed", plan.shuffled, plan.reversed);
    Ok(out)
}

#[derive(Serialize)]
struct RenderReport {
    plans: usize,
    executed: usize,
    dry_run: usize,
    missing_media: Vec<String>,
}

fn render(cx: &Cx<'_>) -> Result<StageOutput> {
    let cfg = cx.cfg;
    let corpus = cx.corpus()?;
    let perms = cx.permutations()?;
    let media_dir = Path::new(MEDIA_DIR);
    let mut plans: Vec<MediaPlan> = Vec::new();
    let mut missing = Vec::new();
    for clip in cx.clips()? {
        let record = cx.media_source(corpus.get(&clip.video_id).context("clip without corpus record")?);
        let mut video_plans = Vec::new();
        let mut forced = cfg.dry_run;
        for perm in [None, perms.get(&clip.video_id)] {
            if perm.is_none() && !video_plans.is_empty() {
                continue;
            }
            match plan_clip_render(&record, &clip, perm, media_dir) {
                Ok(p) => video_plans.push(p),
                Err(MediaError::MediaMissing { plan, .. }) => {
                    forced = true;
                    video_plans.push(*plan);
                }
                Err(e) => return Err(e.into()),
            }
        }
        if forced && video_plans.iter().all(|p| p.dry_run) {
            missing.push(record.video_id.clone());
        }
        let original = clip_path(&clip.video_id, "original");
        let frames = plan_frame_extraction(
            &clip.video_id,
            &original,
            clip.clip_duration_s,
            cfg.media.n_frames,
            cfg.frame_size(),
            media_dir,
        );
        let perturb = plan_perturbation(
            &clip.video_id,
            &frames.outputs,
            &cfg.media.perturbation,
            cfg.frame_size(),
            media_dir,
        )?;
        video_plans.push(frames);
        video_plans.push(perturb);
        for p in &mut video_plans {
            p.dry_run |= forced;
        }
        plans.extend(video_plans);
    }
    let mut out = StageOutput::default();
    let toolkit = Toolkit::new(&cfg.media.toolkit).in_dir(cx.out);
    let mut executed = 0;
    for plan in plans.iter().filter(|p| !p.dry_run) {
        execute_plan(plan, &toolkit)?.into_result()?;
        executed += 1;
        out.written.extend(plan.outputs.iter().cloned());
    }
    let dry = plans.iter().filter(|p| p.dry_run).count();
    out.jsonl("render_plans.jsonl", &plans);
    out.json(
        "render_report.json",
        &RenderReport {
            plans: plans.len(),
            executed,
            dry_run: dry,
            missing_media: missing.clone(),
        },
    );
    out.summary = format!(
        "{} plans, {executed} executed, {dry} dry-run ({} videos without media)",
        plans.len(),
        missing.len()
    );
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRow {
    pub video_id: String,
    pub question: String,
    pub answer: String,
    pub relation: timewarp_core::promptkit::TargetRelation,
}

fn gen_explicit(cx: &Cx<'_>) -> Result<StageOutput> {
    let corpus = cx.corpus()?;
    let perms = cx.permutations()?;
    let clips = cx.clips()?;
    let client = cx.client()?;
    let templates = cx.cfg.templates();
    let gen = Generator {
        client: &client,
        templates: &templates,
        model_id: &cx.cfg.backend.model_id,
    };
    let results = par_map(
        &clips,
        cx.cfg.backend.concurrency,
        |_, clip| -> Result<(Vec<QaRow>, Vec<PreferenceRecord>, Vec<String>)> {
            let record = corpus.get(&clip.video_id).context("clip without corpus record")?;
            let original = build_composite_caption(record, &clip.kept_scene_indices)?;
            let prompt = templates.render(
                TemplateId::OeQaGen,
                &placeholders([("composite_caption", &original.rendered)]),
            )?;
            let raw = client
                .generate(&timewarp_core::llmclient::GenRequest::text(prompt, gen.model_id))
                .with_context(|| format!("QA generation for {}", clip.video_id))?;
            let mut diags = Vec::new();
            let qa = match parse_oe_qa(&raw.text) {
                Ok(p) => {
                    diags.extend(p.dropped.into_iter().map(|d| format!("{}: {d}", clip.video_id)));
                    p.items
                }
                Err(e) => {
                    diags.push(format!("{}: {e}", clip.video_id));
                    Vec::new()
                }
            };
            let rows = qa
                .iter()
                .map(|q| QaRow {
                    video_id: clip.video_id.clone(),
                    question: q.question.clone(),
                    answer: q.answer.clone(),
                    relation: q.target_relation,
                })
                .collect();
            let Some(perm) = perms.get(&clip.video_id) else {
                return Ok((rows, Vec::new(), diags));
            };
            let permuted = build_composite_caption(record, &perm.scene_order(clip))?;
            let paths = ClipPaths {
                original: clip_path(&clip.video_id, "original"),
                permuted: clip_path(&clip.video_id, &perm.kind.to_string()),
            };
            let pairs = build_explicit_pairs(perm, &original, &permuted, &qa, &paths, &gen)?;
            diags.extend(pairs.diagnostics);
            Ok((rows, pairs.records, diags))
        },
    );
    let (mut qa, mut pairs, mut diags) = (Vec::new(), Vec::new(), Vec::new());
    for r in results {
        let (q, p, d) = r?;
        qa.extend(q);
        pairs.extend(p);
        diags.extend(d);
    }
    let mut out = StageOutput::default();
    out.jsonl("qa.jsonl", &qa);
    out.jsonl("dpo_explicit.jsonl", &pairs);
    out.jsonl("sft.jsonl", &export_sft(&pairs));
    out.lines("explicit_diagnostics.txt", &diags);
    out.summary = format!(
        "{} QA pairs, {} preference records, {} skipped",
        qa.len(),
        pairs.len(),
        diags.len()
    );
    Ok(out)
}

fn absolute(out: &Path, rel: &[String]) -> Vec<String> {
    rel.iter().map(|p| out.join(p).display().to_string()).collect()
}

fn gen_implicit(cx: &Cx<'_>) -> Result<StageOutput> {
    let cfg = cx.cfg;
    let corpus = cx.corpus()?;
    let clips = cx.clips()?;
    let client = cx.client()?;
    let templates = cx.cfg.templates();
    let gen = Generator {
        client: &client,
        templates: &templates,
        model_id: &cfg.backend.model_id,
    };
    let media_dir = Path::new(MEDIA_DIR);
    let spec = cfg.media.perturbation;
    let results = par_map(
        &clips,
        cfg.backend.concurrency,
        |index, clip| -> Result<PreferenceRecord> {
            let record = corpus.get(&clip.video_id).context("clip without corpus record")?;
            let original = clip_path(&clip.video_id, "original");
            let frames = plan_frame_extraction(
                &clip.video_id,
                &original,
                clip.clip_duration_s,
                cfg.media.n_frames,
                cfg.frame_size(),
                media_dir,
            );
            let clean = absolute(cx.out, &frames.outputs);
            let perturbed = match cfg.implicit.mode {
                ImplicitMode::Frame => {
                    let plan = plan_perturbation(&clip.video_id, &frames.outputs, &spec, cfg.frame_size(), media_dir)?;
                    absolute(cx.out, &plan.outputs)
                }
                ImplicitMode::Prompt => Vec::new(),
            };
            let inputs = ImplicitInputs {
                video_path: &original,
                clean: &clean,
                perturbed: (cfg.implicit.mode == ImplicitMode::Frame).then_some((&spec, perturbed.as_slice())),
            };
            Ok(build_implicit_pairs(record, &inputs, cfg.implicit.mode, index, &gen)?)
        },
    );
    let mut pairs = Vec::new();
    let mut diags = Vec::new();
    for (clip, r) in clips.iter().zip(results) {
        match r {
            Ok(p) => pairs.push(p),
            Err(e) => {
                if let Some(timewarp_core::llmclient::LlmError::CredentialMissing(_)) = e.downcast_ref() {
                    return Err(e);
                }
                diags.push(format!("{}: {e:#}", clip.video_id));
            }
        }
    }
    let mut out = StageOutput::default();
    out.jsonl("dpo_implicit.jsonl", &pairs);
    out.lines("implicit_diagnostics.txt", &diags);
    out.summary = format!("{} preference records, {} failed", pairs.len(), diags.len());
    Ok(out)
}

fn to_kto(cx: &Cx<'_>) -> Result<StageOutput> {
    let pairs: Vec<PreferenceRecord> = cx.read("dpo_explicit.jsonl")?;
    let kto = dpo_to_kto(&pairs);
    let mut out = StageOutput::default();
    out.jsonl("kto.jsonl", &kto.records);
    let mut summary = format!("{} KTO records from {} pairs", kto.records.len(), pairs.len());
    if let Some(n) = cx.cfg.kto.sample {
        let sample: Vec<KtoRecord> = sample_kto(&kto.records, n, cx.cfg.seed)?;
        out.jsonl("kto_sample.jsonl", &sample);
        summary.push_str(&format!(", sampled {n}"));
    }
    out.lines("kto_diagnostics.txt", &kto.diagnostics);
    out.summary = summary;
    Ok(out)
}

fn merge(cx: &Cx<'_>) -> Result<StageOutput> {
    let mut parts = Vec::new();
    for p in &cx.cfg.mixture.parts {
        let records: Vec<PreferenceRecord> = match p.source.as_str() {
            "explicit" => cx.read("dpo_explicit.jsonl")?,
            "implicit" => cx.read("dpo_implicit.jsonl")?,
            path => read_jsonl(Path::new(path)).with_context(|| format!("mixture part `{}`", p.name))?,
        };
        parts.push(MixturePart {
            name: p.name.clone(),
            records,
            take: p.take,
        });
    }
    let merged = merge_mixture(&parts, cx.cfg.seed)?;
    let mut out = StageOutput::default();
    out.jsonl("mixture.jsonl", &merged);
    out.summary = format!("{} records from {} parts", merged.len(), parts.len());
    Ok(out)
}

fn bench_mcqa(cx: &Cx<'_>) -> Result<StageOutput> {
    let corpus = cx.corpus()?;
    let perms = cx.permutations()?;
    let clips = cx.clips()?;
    let client = cx.client()?;
    let templates = cx.cfg.templates();
    let gen = Generator {
        client: &client,
        templates: &templates,
        model_id: &cx.cfg.backend.model_id,
    };
    let results = par_map(
        &clips,
        cx.cfg.backend.concurrency,
        |_, clip| -> Result<(Vec<BenchmarkItem>, Vec<String>)> {
            let record = corpus.get(&clip.video_id).context("clip without corpus record")?;
            let original = build_composite_caption(record, &clip.kept_scene_indices)?;
            let original_path = clip_path(&clip.video_id, "original");
            let perm = perms.get(&clip.video_id);
            let permuted = perm
                .map(|p| build_composite_caption(record, &p.scene_order(clip)))
                .transpose()?;
            let permuted_path = perm.map(|p| clip_path(&clip.video_id, &p.kind.to_string()));
            let inputs = BenchInputs {
                original: &original,
                original_path: &original_path,
                permuted: match (perm, &permuted, &permuted_path) {
                    (Some(p), Some(c), Some(path)) => Some((p, c, path.as_str())),
                    _ => None,
                },
            };
            let built = build_mcqa_items(&inputs, &gen)?;
            Ok((built.records, built.diagnostics))
        },
    );
    let (mut items, mut diags) = (Vec::new(), Vec::new());
    for r in results {
        let (i, d) = r?;
        items.extend(i);
        diags.extend(d);
    }
    let mut out = StageOutput::default();
    out.jsonl("benchmark.jsonl", &items);
    out.lines("bench_diagnostics.txt", &diags);
    let shuffled = items.iter().filter(|i| i.perm_ref.is_some()).count();
    out.summary = format!("{} normal and {shuffled} shuffled items", items.len() - shuffled);
    Ok(out)
}

fn bench_probes(cx: &Cx<'_>) -> Result<StageOutput> {
    let corpus = cx.corpus()?;
    let p = &cx.cfg.probes;
    let videos = select_probe_videos(&corpus.records, p.n_videos, p.min_captions, cx.cfg.seed);
    let mut statements = Vec::new();
    let mut coverage = Vec::new();
    let mut warnings = Vec::new();
    for v in &videos {
        let set = build_order_probes(v, &v.media_path, cx.cfg.seed)?;
        statements.extend(set.statements);
        coverage.extend(set.coverage);
        warnings.extend(set.warnings);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut out = StageOutput::default();
    out.jsonl("probes.jsonl", &statements);
    let missing = coverage.iter().filter(|c| !c.present).count();
    out.json(
        "probe_coverage.json",
        &json!({"videos": videos.len(), "omitted_subcategories": missing, "coverage": coverage, "warnings": warnings}),
    );
    out.summary = format!(
        "{} statements over {} videos, {missing} subcategories omitted",
        statements.len(),
        videos.len()
    );
    Ok(out)
}

fn predictions_or_baseline(
    path: &Option<PathBuf>,
    baseline: impl FnOnce() -> Vec<PredictionLine>,
    out: &mut StageOutput,
    name: &str,
) -> Result<(Vec<PredictionLine>, &'static str)> {
    match path {
        Some(p) => Ok((
            read_jsonl(p).with_context(|| format!("reading {}", p.display()))?,
            "predictions",
        )),
        None => {
            let preds = baseline();
            out.jsonl(name, &preds);
            Ok((preds, "random baseline"))
        }
    }
}

fn score_mcqa_stage(cx: &Cx<'_>) -> Result<StageOutput> {
    let items: Vec<BenchmarkItem> = cx.read("benchmark.jsonl")?;
    let mut out = StageOutput::default();
    let (preds, label) = predictions_or_baseline(
        &cx.cfg.eval.mcqa_predictions,
        || random_mcqa_predictions(&items, cx.cfg.seed),
        &mut out,
        "mcqa_predictions.jsonl",
    )?;
    let report = score_mcqa(&items, &preds)?;
    out.json("mcqa_scores.json", &json!({"predictor": label, "report": report}));
    out.text(
        "mcqa_scores.txt",
        report.render_table(&format!("MCQA accuracy ({label})")),
    );
    out.summary = format!("overall accuracy {:.2} ({label})", report.overall.accuracy);
    Ok(out)
}

fn score_group_stage(cx: &Cx<'_>) -> Result<StageOutput> {
    let pairs: Vec<PreferenceRecord> = cx.read("dpo_explicit.jsonl")?;
    let quads = build_quads(&pairs);
    let truth: Vec<QuadruplePrediction> = quads.iter().map(|q| q.truth()).collect();
    let mut out = StageOutput::default();
    out.jsonl("quads.jsonl", &quads);
    let (preds, label) = match &cx.cfg.eval.quad_predictions {
        Some(p) => (read_jsonl(p)?, "predictions"),
        None => {
            let preds = random_quad_predictions(&truth, cx.cfg.seed);
            out.jsonl("quad_predictions.jsonl", &preds);
            (preds, "random baseline")
        }
    };
    let scores = score_group(&preds, &truth)?;
    out.json("group_scores.json", &json!({"predictor": label, "scores": scores}));
    out.text(
        "group_scores.txt",
        scores.render_table(&format!("Quadruple matching ({label})")),
    );
    out.summary = format!(
        "text {:.2} video {:.2} group {:.2} ({label})",
        scores.text, scores.video, scores.group
    );
    Ok(out)
}

fn grade_probes(cx: &Cx<'_>) -> Result<StageOutput> {
    let statements: Vec<OrderStatement> = cx.read("probes.jsonl")?;
    let mut out = StageOutput::default();
    let (preds, label) = predictions_or_baseline(
        &cx.cfg.eval.probe_predictions,
        || random_probe_predictions(&statements, cx.cfg.seed),
        &mut out,
        "probe_predictions.jsonl",
    )?;
    let report = grade_order_probes(&statements, &preds)?;
    let sweep = strictness_sweep(&statements, &preds)?;
    let mut table = report.render_table(&format!("Order probes ({label})"));
    for p in &sweep {
        table.push_str(&format!("k={} of 4: {:.2}\n", p.k, p.rate.pass_rate));
    }
    out.json(
        "probe_grades.json",
        &json!({"predictor": label, "report": report, "sweep": sweep}),
    );
    out.text("probe_grades.txt", table);
    out.summary = format!(
        "subcategory pass {:.2}, category pass {:.2} ({label})",
        report.subcategory_overall.pass_rate, report.category_overall.pass_rate
    );
    Ok(out)
}

/// Seeded batch of valid log-probability records.
pub fn synthetic_batch(n: usize, seed: u64) -> Vec<LogProbs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| LogProbs {
            chosen_policy: -rng.gen_range(0.05..6.0),
            rejected_policy: -rng.gen_range(0.05..6.0),
            chosen_reference: -rng.gen_range(0.05..6.0),
            rejected_reference: -rng.gen_range(0.05..6.0),
            weight: rng.gen_range(0.05..1.0),
        })
        .collect()
}

fn verify_loss(cx: &Cx<'_>) -> Result<StageOutput> {
    let mut out = StageOutput::default();
    let batch: Vec<LogProbs> = match &cx.cfg.verify.batch {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_jsonl(&text, &p.display().to_string())?
        }
        None => {
            let b = synthetic_batch(cx.cfg.verify.synthetic_size, cx.cfg.seed);
            out.jsonl("verify_batch.jsonl", &b);
            b
        }
    };
    let loss = dpo_loss(&batch)?;
    let grads = dpo_grad(&batch)?;
    out.json("verify.json", &json!({"n": batch.len(), "loss": loss, "grads": grads}));
    out.summary = format!("mean loss {loss:.6} over {} examples", batch.len());
    Ok(out)
}

fn stats(cx: &Cx<'_>) -> Result<StageOutput> {
    let corpus = cx.corpus()?;
    let clips = cx.clips()?;
    let perms = cx.permutations()?;
    let qa: Vec<QaRow> = cx.read("qa.jsonl")?;
    let explicit: Vec<PreferenceRecord> = cx.read("dpo_explicit.jsonl")?;
    let implicit: Vec<PreferenceRecord> = cx.read("dpo_implicit.jsonl")?;
    let mut qa_counts: BTreeMap<String, usize> = BTreeMap::new();
    for row in &qa {
        *qa_counts.entry(row.video_id.clone()).or_default() += 1;
    }
    let shuffled = perms.values().filter(|p| p.kind == PermKind::Shuffled).count();
    let reversed = perms.len() - shuffled;
    let mut report = corpus_stats(&corpus, &clips, &qa_counts).with_permutation_counts(shuffled, reversed);
    report.preference_records = explicit.len() + implicit.len();
    let all: Vec<PreferenceRecord> = explicit.iter().chain(&implicit).cloned().collect();
    let d = &cx.cfg.difficulty;
    let difficulty = difficulty_probe(&all, d.metric, d.threshold);
    let mut out = StageOutput::default();
    out.json(
        "stats.json",
        &json!({
            "stats": report,
            "qa_pairs": qa.len(),
            "preference_records": {"explicit": explicit.len(), "implicit": implicit.len()},
            "hard_pairs": difficulty.hard,
        }),
    );
    out.text("stats.txt", report.render_table("This run"));
    out.json("difficulty.json", &difficulty);
    out.summary = format!(
        "{} clips, {} QA pairs, {} preference records, {shuffled} shuffled / {reversed} reversed",
        clips.len(),
        qa.len(),
        report.preference_records
    );
    Ok(out)
}
