//! Pipeline driver for the `timewarp` command.

pub mod config;
pub mod manifest;
pub mod stages;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use timewarp_core::digest::sha256_hex;
use timewarp_core::llmclient::LlmError;

use config::{ConfigError, RunConfig};
use manifest::{file_digest, write_atomic, Manifest, StageRecord};
pub use stages::Stage;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Credential(String),
    #[error("stage `{stage}` needs outputs of {} which are missing or modified; run them first", missing.join(", "))]
    DependencyMissing { stage: &'static str, missing: Vec<String> },
    #[error("stage `{stage}` failed: {source:#}")]
    StageFailed { stage: &'static str, source: anyhow::Error },
    #[error("output directory: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Credential(_) => 2,
            CliError::DependencyMissing { .. } => 3,
            CliError::StageFailed { .. } | CliError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Ran(String),
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageStatus {
    pub stage: Stage,
    pub status: Status,
}

impl std::fmt::Display for StageStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.status {
            Status::Ran(summary) => write!(f, "{:<13} ran: {summary}", self.stage.name()),
            Status::Skipped => write!(f, "{:<13} skipped (up-to-date)", self.stage.name()),
        }
    }
}

fn params_digest(stage: Stage, cfg: &RunConfig) -> String {
    sha256_hex(stage.params(cfg).to_string().as_bytes())
}

/// Digests of everything the stage reads, or the dependencies that are not
/// available.
fn input_digests(
    stage: Stage,
    cfg: &RunConfig,
    manifest: &Manifest,
    out: &Path,
) -> Result<BTreeMap<String, String>, CliError> {
    let mut inputs = BTreeMap::new();
    let mut missing = Vec::new();
    for dep in stage.deps() {
        match manifest.stages.get(dep.name()) {
            Some(rec) if manifest.outputs_intact(dep.name(), out) => {
                inputs.extend(rec.outputs.iter().map(|(k, v)| (k.clone(), v.clone())));
            }
            _ => missing.push(dep.name().to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(CliError::DependencyMissing {
            stage: stage.name(),
            missing,
        });
    }
    for path in stage.external_inputs(cfg) {
        let digest = file_digest(&path).map_err(|e| CliError::StageFailed {
            stage: stage.name(),
            source: anyhow::anyhow!("{}: {e}", path.display()),
        })?;
        inputs.insert(path.display().to_string(), digest);
    }
    Ok(inputs)
}

fn classify(stage: Stage, source: anyhow::Error) -> CliError {
    let credential = source.chain().find_map(|e| match e.downcast_ref::<LlmError>() {
        Some(LlmError::CredentialMissing(v)) => Some(v.clone()),
        _ => None,
    });
    match credential {
        Some(var) => CliError::Credential(format!(
            "stage `{}`: credential environment variable {var} is not set",
            stage.name()
        )),
        None => CliError::StageFailed {
            stage: stage.name(),
            source,
        },
    }
}

/// Runs `targets` in order. A stage whose parameters, inputs and outputs are
/// unchanged since its last run is skipped unless `force` is set.
pub fn run_stages(cfg: &RunConfig, targets: &[Stage], force: bool) -> Result<Vec<StageStatus>, CliError> {
    let out = cfg.output_dir.as_path();
    std::fs::create_dir_all(out)?;
    let mut manifest = Manifest::load(out)?;
    manifest.seed = cfg.seed;
    let mut statuses = Vec::new();
    for &stage in targets {
        let params = params_digest(stage, cfg);
        let inputs = input_digests(stage, cfg, &manifest, out)?;
        let up_to_date = manifest
            .stages
            .get(stage.name())
            .is_some_and(|rec| rec.params_digest == params && rec.inputs == inputs)
            && manifest.outputs_intact(stage.name(), out);
        if up_to_date && !force {
            log::info!("{}: up-to-date", stage.name());
            statuses.push(StageStatus {
                stage,
                status: Status::Skipped,
            });
            continue;
        }
        log::info!("{}: running", stage.name());
        let started = Instant::now();
        let cx = stages::Cx { cfg, out };
        let result = stage.run(&cx).map_err(|e| classify(stage, e))?;
        let mut outputs = BTreeMap::new();
        for (name, bytes) in &result.files {
            write_atomic(&out.join(name), bytes)?;
            outputs.insert(name.clone(), sha256_hex(bytes));
        }
        for name in &result.written {
            outputs.insert(name.clone(), file_digest(&out.join(name))?);
        }
        if let Some(prev) = manifest.stages.get(stage.name()) {
            let current: BTreeSet<&String> = outputs.keys().collect();
            for stale in prev.outputs.keys().filter(|k| !current.contains(k)) {
                let _ = std::fs::remove_file(out.join(stale));
            }
        }
        manifest.stages.insert(
            stage.name().to_string(),
            StageRecord {
                params_digest: params,
                seed: cfg.seed,
                inputs,
                outputs,
                wall_time_s: started.elapsed().as_secs_f64(),
                summary: result.summary.clone(),
            },
        );
        manifest.save(out)?;
        statuses.push(StageStatus {
            stage,
            status: Status::Ran(result.summary),
        });
    }
    Ok(statuses)
}
