//! Plan execution: prompts -> image backend -> files + manifest.
//!
//! A bounded pool of worker threads processes pending plan items; manifest
//! appends are serialized through the single writer on the coordinating
//! thread. Images land via write-temp-then-rename, the manifest is
//! append-only with torn-tail repair, and an advisory file lock keeps a
//! second orchestrator off the same output directory (and releases itself
//! if the process dies). Any interleaving of kill and restart therefore
//! converges to one terminal manifest entry per plan index.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, GenerationParams, ImageBackend, ImageRequest};
use crate::digest::bytes_digest;
use crate::manifest::{
    self, EntryStatus, Manifest, ManifestEntry, ManifestError, ManifestHeader, ManifestWriter,
};
use crate::prompts::{Enricher, PromptError, PromptSpec, PromptTemplate};
use crate::sampling::{GenerationPlan, PlanItem};

pub const IMAGES_SUBDIR: &str = "images";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PLAN_FILE: &str = "plan.tsv";
pub const LOCK_FILE: &str = "run.lock";
pub const RUN_LOG_FILE: &str = "run.log";
const TEMP_PREFIX: &str = ".tmp.";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("refusing to resume: {0}")]
    RefusesResume(String),
    #[error("another run owns {0} (lock held)")]
    ConcurrentRun(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid {what}: {message}")]
    Validation { what: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Advisory exclusive lock on the output directory. Released on drop or
/// process death, so a crashed run never wedges the directory.
pub struct DirLock {
    _file: File,
}

impl DirLock {
    pub fn acquire(path: &Path) -> Result<Self, OrchestratorError> {
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(false)
            .open(path)
            .map_err(io_err(path))?;
        #[cfg(unix)]
        {
            use std::os::unix::io::AsRawFd;
            let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX | libc::LOCK_NB) };
            if rc != 0 {
                return Err(OrchestratorError::ConcurrentRun(path.to_path_buf()));
            }
        }
        let _ = file.set_len(0);
        let _ = writeln!(file, "{}", std::process::id());
        let _ = file.sync_data();
        Ok(DirLock { _file: file })
    }
}

/// A stored image artifact: where it landed and what it hashes to.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageArtifact {
    pub bytes_digest: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub backend_id: String,
}

/// Terminal failure of one image request, with the attempts spent.
#[derive(Debug)]
pub struct ImageFailure {
    pub message: String,
    pub attempts: u32,
}

/// Run one image request to a terminal outcome: retry per the backend's
/// policy, then write the image atomically (temp file, fsync, rename).
pub fn request_image(
    backend: &dyn ImageBackend,
    req: &ImageRequest,
    out_dir: &Path,
    file_name: &str,
) -> Result<(ImageArtifact, u32), ImageFailure> {
    let policy = backend.retry();
    let max_attempts = policy.max_attempts.max(1);
    let mut attempt = 0;
    let bytes = loop {
        attempt += 1;
        match backend.generate(req) {
            Ok(bytes) => break bytes,
            Err(err) => {
                let retryable = matches!(err, BackendError::Unavailable { retryable: true, .. });
                if retryable && attempt < max_attempts {
                    let delay = policy.backoff_ms.saturating_mul(1 << (attempt - 1));
                    log::warn!("image attempt {attempt}/{max_attempts} for {file_name}: {err}");
                    std::thread::sleep(Duration::from_millis(delay.min(10_000)));
                    continue;
                }
                return Err(ImageFailure {
                    message: err.to_string(),
                    attempts: attempt,
                });
            }
        }
    };

    let images_dir = out_dir.join(IMAGES_SUBDIR);
    let temp_path = images_dir.join(format!("{TEMP_PREFIX}{file_name}"));
    let final_path = images_dir.join(file_name);
    let write = || -> std::io::Result<()> {
        let mut file = File::create(&temp_path)?;
        file.write_all(&bytes)?;
        file.sync_all()?;
        drop(file);
        fs::rename(&temp_path, &final_path)?;
        if let Ok(dir) = File::open(&images_dir) {
            let _ = dir.sync_all();
        }
        Ok(())
    };
    write().map_err(|e| ImageFailure {
        message: format!("writing {}: {e}", final_path.display()),
        attempts: attempt,
    })?;
    Ok((
        ImageArtifact {
            bytes_digest: bytes_digest(&bytes),
            path: format!("{IMAGES_SUBDIR}/{file_name}"),
            width: req.width,
            height: req.height,
            backend_id: backend.id().to_string(),
        },
        attempt,
    ))
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

pub fn image_file_name(item: &PlanItem) -> String {
    format!(
        "{:06}_{}_{}_{}.png",
        item.index,
        sanitize(&item.class_name),
        sanitize(&item.weather),
        sanitize(&item.time)
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOptions {
    pub concurrency: usize,
    pub retry_failed: bool,
    pub generation: GenerationParams,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            concurrency: 4,
            retry_failed: false,
            generation: GenerationParams::default(),
        }
    }
}

/// Outcome of one `run` invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub requested: u64,
    pub succeeded: u64,
    pub failed: u64,
    pub skipped_resume: u64,
    pub wall_time_secs: f64,
    /// Succeeded counts over the whole manifest, per (weather, time).
    pub cell_counts: BTreeMap<String, u64>,
    /// Succeeded counts over the whole manifest, per class.
    pub class_counts: BTreeMap<String, u64>,
    /// Failed entries present in the final manifest (drives exit status).
    pub failed_total: u64,
}

fn sweep_temp_files(images_dir: &Path) -> Result<usize, OrchestratorError> {
    let mut removed = 0;
    for entry in fs::read_dir(images_dir).map_err(io_err(images_dir))? {
        let entry = entry.map_err(io_err(images_dir))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with(TEMP_PREFIX) {
            fs::remove_file(entry.path()).map_err(io_err(&entry.path()))?;
            removed += 1;
        }
    }
    Ok(removed)
}

/// Open or create the output directory's manifest against this plan.
fn prepare_manifest(
    out_dir: &Path,
    plan: &GenerationPlan,
    plan_digest: &str,
    retry_failed: bool,
) -> Result<(ManifestWriter, Vec<ManifestEntry>), OrchestratorError> {
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut fresh = !manifest_path.exists();
    if !fresh {
        // a kill before the header line became durable leaves a file with
        // no complete line; start over rather than wedge the directory
        let bytes = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
        if !bytes.contains(&b'\n') {
            log::warn!("{}: discarding manifest with torn header", manifest_path.display());
            fs::remove_file(&manifest_path).map_err(io_err(&manifest_path))?;
            fresh = true;
        }
    }
    if fresh {
        let writer = ManifestWriter::create(
            &manifest_path,
            &ManifestHeader {
                manifest_version: 1,
                plan_digest: plan_digest.to_string(),
                master_seed: plan.master_seed,
            },
        )?;
        return Ok((writer, Vec::new()));
    }

    if retry_failed {
        let dropped = manifest::compact_failed(&manifest_path)?;
        if dropped > 0 {
            log::info!("re-queued {dropped} previously failed item(s)");
        }
    }
    // open first: repairs a torn tail in place before we read state
    let writer = ManifestWriter::open_append(&manifest_path)?;
    let existing: Manifest = manifest::load(&manifest_path)?;
    if existing.header.plan_digest != plan_digest {
        return Err(OrchestratorError::RefusesResume(format!(
            "manifest {} was written for plan digest {}, current plan digest is {}",
            manifest_path.display(),
            existing.header.plan_digest,
            plan_digest
        )));
    }
    let by_index: HashMap<u32, u64> = plan.items.iter().map(|i| (i.index, i.derived_seed)).collect();
    for entry in &existing.entries {
        match by_index.get(&entry.index) {
            Some(&seed) if seed == entry.seed => {}
            Some(_) => {
                return Err(OrchestratorError::RefusesResume(format!(
                    "manifest entry {} carries a seed that is not the plan's",
                    entry.index
                )))
            }
            None => {
                return Err(OrchestratorError::RefusesResume(format!(
                    "manifest entry {} is not in the plan",
                    entry.index
                )))
            }
        }
    }
    Ok((writer, existing.entries))
}

/// Materialize the plan's plan.tsv inside the output directory, or verify
/// the one already there matches. Written atomically so a kill can never
/// leave a torn plan copy behind.
fn prepare_plan_file(out_dir: &Path, plan: &GenerationPlan, plan_digest: &str) -> Result<(), OrchestratorError> {
    let plan_path = out_dir.join(PLAN_FILE);
    if plan_path.exists() {
        let existing = GenerationPlan::from_tsv_file(&plan_path).map_err(|e| {
            OrchestratorError::RefusesResume(format!("unreadable {}: {e}", plan_path.display()))
        })?;
        if existing.digest() != plan_digest {
            return Err(OrchestratorError::RefusesResume(format!(
                "{} holds a different plan (digest {})",
                plan_path.display(),
                existing.digest()
            )));
        }
        return Ok(());
    }
    write_atomic(&plan_path, plan.to_tsv().as_bytes())
}

/// Write via temp + rename next to the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), OrchestratorError> {
    let tmp = path.with_extension("tmp");
    let attempt = || -> std::io::Result<()> {
        let mut file = File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        drop(file);
        fs::rename(&tmp, path)
    };
    attempt().map_err(io_err(path))
}

fn entry_for_outcome(
    item: &PlanItem,
    spec: &PromptSpec,
    outcome: Result<(ImageArtifact, u32), ImageFailure>,
) -> ManifestEntry {
    let (status, image_path, image_digest, error, attempt_count) = match outcome {
        Ok((artifact, attempts)) => (
            EntryStatus::Succeeded,
            Some(artifact.path),
            Some(artifact.bytes_digest),
            None,
            attempts,
        ),
        Err(failure) => (
            EntryStatus::Failed,
            None,
            None,
            Some(failure.message),
            failure.attempts,
        ),
    };
    ManifestEntry {
        index: item.index,
        class_name: item.class_name.clone(),
        weather: item.weather.clone(),
        time: item.time.clone(),
        base_prompt: spec.base_prompt.clone(),
        enriched_prompt: spec.enriched_prompt.clone(),
        prompt_source: spec.source,
        seed: item.derived_seed,
        status,
        image_path,
        image_digest,
        error,
        attempt_count,
    }
}

fn process_item(
    item: &PlanItem,
    template: &PromptTemplate,
    enricher: &Enricher,
    backend: &dyn ImageBackend,
    generation: &GenerationParams,
    out_dir: &Path,
) -> ManifestEntry {
    let spec = match enricher.generate_prompt(item, template) {
        Ok(spec) => spec,
        Err(err) => {
            // no prompt, no image: record the terminal failure
            return ManifestEntry {
                index: item.index,
                class_name: item.class_name.clone(),
                weather: item.weather.clone(),
                time: item.time.clone(),
                base_prompt: String::new(),
                enriched_prompt: String::new(),
                prompt_source: crate::prompts::PromptSource::FallbackBank,
                seed: item.derived_seed,
                status: EntryStatus::Failed,
                image_path: None,
                image_digest: None,
                error: Some(format!("prompt generation: {err}")),
                attempt_count: 1,
            };
        }
    };
    let request = generation.request(spec.enriched_prompt.clone(), item.derived_seed);
    let outcome = request_image(backend, &request, out_dir, &image_file_name(item));
    entry_for_outcome(item, &spec, outcome)
}

/// Execute a plan against an output directory, resuming any prior progress.
pub fn run(
    plan: &GenerationPlan,
    template: &PromptTemplate,
    enricher: &Enricher,
    backend: &dyn ImageBackend,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<RunReport, OrchestratorError> {
    let started = Instant::now();
    plan.validate().map_err(|e| OrchestratorError::Validation {
        what: "plan".into(),
        message: e.to_string(),
    })?;
    template.validate()?;
    if options.concurrency < 1 {
        return Err(OrchestratorError::Validation {
            what: "concurrency".into(),
            message: "must be at least 1".into(),
        });
    }

    let images_dir = out_dir.join(IMAGES_SUBDIR);
    fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
    let _lock = DirLock::acquire(&out_dir.join(LOCK_FILE))?;

    let plan_digest = plan.digest();
    prepare_plan_file(out_dir, plan, &plan_digest)?;
    let swept = sweep_temp_files(&images_dir)?;
    if swept > 0 {
        log::warn!("removed {swept} orphan temp file(s) from an interrupted run");
    }
    let (mut writer, existing) = prepare_manifest(out_dir, plan, &plan_digest, options.retry_failed)?;

    let terminal: HashMap<u32, EntryStatus> = existing.iter().map(|e| (e.index, e.status)).collect();
    let skipped_resume = existing.len() as u64;
    let pending: Vec<&PlanItem> = plan
        .items
        .iter()
        .filter(|item| !terminal.contains_key(&item.index))
        .collect();

    let queue: Mutex<VecDeque<&PlanItem>> = Mutex::new(pending.iter().copied().collect());
    let (sender, receiver) = mpsc::channel::<ManifestEntry>();
    let workers = options.concurrency.min(pending.len().max(1));
    let append_order: Vec<u32> = pending.iter().map(|item| item.index).collect();

    let mut new_entries: Vec<ManifestEntry> = Vec::with_capacity(pending.len());
    std::thread::scope(|scope| -> Result<(), OrchestratorError> {
        for _ in 0..workers {
            let sender = sender.clone();
            let queue = &queue;
            let generation = &options.generation;
            scope.spawn(move || loop {
                let item = {
                    let mut q = queue.lock().unwrap();
                    q.pop_front()
                };
                let Some(item) = item else { break };
                let entry = process_item(item, template, enricher, backend, generation, out_dir);
                if sender.send(entry).is_err() {
                    break;
                }
            });
        }
        drop(sender);
        // single manifest writer: appends happen only on this thread, and
        // in plan order (reorder buffer of at most K entries), so identical
        // runs produce byte-identical manifests
        let mut reorder: BTreeMap<u32, ManifestEntry> = BTreeMap::new();
        let mut cursor = 0usize;
        for entry in receiver.iter() {
            reorder.insert(entry.index, entry);
            while cursor < append_order.len() {
                let Some(next) = reorder.remove(&append_order[cursor]) else { break };
                writer.append(&next)?;
                new_entries.push(next);
                cursor += 1;
            }
        }
        // reachable only if a worker died mid-item; keep whatever finished
        for (_, entry) in reorder {
            writer.append(&entry)?;
            new_entries.push(entry);
        }
        Ok(())
    })?;

    let mut succeeded_new = 0u64;
    let mut failed_new = 0u64;
    for entry in &new_entries {
        match entry.status {
            EntryStatus::Succeeded => succeeded_new += 1,
            EntryStatus::Failed => failed_new += 1,
        }
    }

    let mut cell_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut class_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut failed_total = 0u64;
    for entry in existing.iter().chain(new_entries.iter()) {
        match entry.status {
            EntryStatus::Succeeded => {
                *cell_counts
                    .entry(format!("{}/{}", entry.weather, entry.time))
                    .or_insert(0) += 1;
                *class_counts.entry(entry.class_name.clone()).or_insert(0) += 1;
            }
            EntryStatus::Failed => failed_total += 1,
        }
    }

    let report = RunReport {
        requested: plan.items.len() as u64,
        succeeded: succeeded_new,
        failed: failed_new,
        skipped_resume,
        wall_time_secs: started.elapsed().as_secs_f64(),
        cell_counts,
        class_counts,
        failed_total,
    };
    append_run_log(out_dir, &report)?;
    Ok(report)
}

/// Timestamps live here, not in the manifest, so manifests stay
/// byte-comparable across identical runs.
fn append_run_log(out_dir: &Path, report: &RunReport) -> Result<(), OrchestratorError> {
    let path = out_dir.join(RUN_LOG_FILE);
    let now = SystemTime::now()
        .duration_since(SystemTime::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_err(&path))?;
    writeln!(
        file,
        "finished_unix={now} requested={} succeeded={} failed={} skipped_resume={} wall_secs={:.3}",
        report.requested, report.succeeded, report.failed, report.skipped_resume, report.wall_time_secs
    )
    .map_err(io_err(&path))?;
    Ok(())
}
